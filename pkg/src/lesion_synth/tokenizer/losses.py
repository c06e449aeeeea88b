"""The five-term tokenizer objective with the lesion-focused background term."""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .networks import hinge_g_loss


@dataclass
class LossBreakdown:
    pixel: torch.Tensor
    lesion_focus: torch.Tensor
    feature: torch.Tensor
    perceptual: torch.Tensor
    adversarial: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def lesion_focus_loss(codes_real, codes_recon, mask_pyramid):
    """Sum over scales of the background-only mean squared code disagreement.

    ``codes_*`` are K tensors (B, d, h_k, w_k); ``mask_pyramid`` holds K
    (B, 1, h_k, w_k) masks where 1 marks lesion cells. The mean runs over every
    element, masked or not.
    """
    if len(codes_real) != len(codes_recon) or len(codes_real) != len(mask_pyramid):
        raise ValueError("code and mask pyramids must have the same number of scales")
    total = codes_real[0].new_zeros(())
    for r, r_hat, m in zip(codes_real, codes_recon, mask_pyramid):
        if r.shape != r_hat.shape or r.shape[-2:] != m.shape[-2:]:
            raise ValueError(f"scale mismatch: {tuple(r.shape)}, {tuple(r_hat.shape)}, {tuple(m.shape)}")
        bg = (1.0 - m.to(r.dtype))
        total = total + (bg * (r - r_hat) ** 2).mean()
    return total


def perceptual_loss(net, image, image_hat):
    feats, feats_hat = net(image), net(image_hat)
    return sum(F.mse_loss(b, a) for a, b in zip(feats, feats_hat))


def vqvae_loss(I, I_hat, codes_real, codes_recon, f, f_hat, mask_pyramid, *,
               lambda_perceptual=1.0, lambda_adversarial=0.1, perceptual_net=None,
               discriminator=None, lesion_focus=True) -> LossBreakdown:
    """Evaluate every term of the tokenizer loss.

    All norms are per-element means. The perceptual and adversarial terms are
    zero when their network is ``None``; the lesion-focus term is zero when
    ``lesion_focus`` is False. Raises ``FloatingPointError`` naming the first
    non-finite term.
    """
    zero = I.new_zeros(())
    pixel = F.mse_loss(I_hat, I)
    lf = lesion_focus_loss(codes_real, codes_recon, mask_pyramid) if lesion_focus else zero
    feature = F.mse_loss(f_hat, f)
    perc = perceptual_loss(perceptual_net, I, I_hat) if perceptual_net is not None else zero
    adv = hinge_g_loss(discriminator(I_hat)) if discriminator is not None else zero
    total = pixel + lf + feature + lambda_perceptual * perc + lambda_adversarial * adv
    out = LossBreakdown(pixel, lf, feature, perc, adv, total)
    for f_ in fields(out):
        if not torch.isfinite(getattr(out, f_.name)).all():
            raise FloatingPointError(f"non-finite {f_.name} loss term")
    return out
