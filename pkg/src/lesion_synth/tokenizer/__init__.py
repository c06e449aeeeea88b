from .estimator import DEFAULT_SCALES, LesionFocusedVQVAE, TrainingDivergedError, load_pyramid, save_pyramid
from .losses import LossBreakdown, lesion_focus_loss, vqvae_loss
from .quantize import build_mask_pyramid, dequantize, quantize_multiscale, residual_cascade

__all__ = [
    "DEFAULT_SCALES", "LesionFocusedVQVAE", "LossBreakdown", "TrainingDivergedError",
    "build_mask_pyramid", "dequantize", "lesion_focus_loss", "load_pyramid",
    "quantize_multiscale", "residual_cascade", "save_pyramid", "vqvae_loss",
]
