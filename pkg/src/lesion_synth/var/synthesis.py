"""Intra- and inter-class lesion synthesis from fitted components."""
from __future__ import annotations

import numpy as np

from .._validation import check_images, check_masks
from ..measurements import MeasurementExtractor, normalize


class LesionSynthesizer:
    """Glue between a fitted tokenizer, a fitted :class:`NextScaleVAR`, the
    measurement normalizer and (for inter-class generation) the codebook.

    Intra-class generation conditions on measurements extracted from a source
    image and its mask; inter-class generation conditions on the codebook's
    class-average measurements instead.
    """

    def __init__(self, var, normalizer=None, codebook=None, extractor=None):
        self.var = var
        self.normalizer = normalizer
        self.codebook = codebook
        self.extractor = extractor or MeasurementExtractor()

    @property
    def uses_measurements(self):
        return self.var.measurement_mode == "extracted"

    def _normalized(self, raw):
        if self.normalizer is None:
            raise ValueError("a fitted measurement normalizer is required")
        return normalize(raw, self.normalizer)

    def intra_conditions(self, images, masks):
        """Normalised measurement vectors for source samples (None when the model ignores them)."""
        if not self.uses_measurements:
            return None
        X = check_images(images)
        return self._normalized(self.extractor.transform(X, check_masks(masks, X.shape[:3])))

    def inter_conditions(self, classes):
        if not self.uses_measurements:
            return None
        if self.codebook is None:
            raise ValueError("inter-class synthesis needs a measurement codebook")
        return self._normalized(np.stack([self.codebook.query(c) for c in classes]))

    def synthesize_intra(self, images, masks, classes, seeds=0, **sampler):
        """One generated image per source sample, same class as the source."""
        classes = np.asarray(classes, dtype=np.int64).reshape(-1)
        cond = self.intra_conditions(images, masks)
        return self.var.generate(classes, cond, seeds, **sampler)

    def synthesize_inter(self, classes, seeds=0, **sampler):
        """One generated image per requested class from codebook statistics."""
        classes = np.asarray(classes, dtype=np.int64).reshape(-1)
        cond = self.inter_conditions(classes)
        return self.var.generate(classes, cond, seeds, **sampler)
