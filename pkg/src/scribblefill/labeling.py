"""Label maps, confidence thresholding, and solve-grid rescaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ValidationError
from .features import FeaturePlanes, RasterImage, bilinear_upsample
from .propagate import IGNORED, CoarseAnnotation, ConfidenceField


@dataclass(frozen=True)
class LabelMap:
    """Dense per-pixel class ids; 255 marks pixels withheld as IGNORED."""

    labels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        if self.labels.ndim != 2 or self.labels.dtype != np.uint8:
            raise ValidationError("labels must be a 2-D uint8 array")

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def ignored_count(self) -> int:
        return int(np.sum(self.labels == IGNORED))


def noise_control(field: ConfidenceField, threshold: float) -> LabelMap:
    """argmax labeling with sub-threshold pixels set to IGNORED.

    A pixel keeps the highest-confidence class when that confidence is at
    least `threshold` (ties go to the lowest class id); otherwise 255.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError("threshold must be in [0, 1]")
    ids, stack = field.stacked()
    best = np.argmax(stack, axis=0)  # first max = lowest id (ids sorted)
    peak = stack[best, np.arange(stack.shape[1])]
    labels = np.where(peak >= threshold, ids[best], IGNORED).astype(np.uint8)
    return LabelMap(labels=labels.reshape(field.height, field.width))


def scaled_dims(width: int, height: int, scale: float) -> tuple[int, int]:
    if not 0.0 < scale <= 1.0:
        raise ValidationError("scale must be in (0, 1]")
    return max(1, round(width * scale)), max(1, round(height * scale))


def _nearest_indices(src: int, dst: int) -> np.ndarray:
    t = np.floor((np.arange(dst) + 0.5) * (src / dst)).astype(np.intp)
    return np.clip(t, 0, src - 1)


def downscale_image(image: RasterImage, target_w: int, target_h: int) -> RasterImage:
    """Area-average downsample of the RGB grid."""
    if (target_w, target_h) == (image.width, image.height):
        return image
    pil = Image.fromarray(image.pixels, mode="RGB")
    out = pil.resize((target_w, target_h), Image.BOX)
    return RasterImage.from_array(np.asarray(out))


def downscale_annotation(ann: CoarseAnnotation, target_w: int,
                         target_h: int) -> CoarseAnnotation:
    """Nearest-neighbor decimation of the markup; errors if a class vanishes."""
    if (target_w, target_h) == (ann.width, ann.height):
        return ann
    xs = _nearest_indices(ann.width, target_w)
    ys = _nearest_indices(ann.height, target_h)
    labels = ann.to_labels()[np.ix_(ys, xs)]
    lost = [cid for cid in ann.classes if not np.any(labels == cid)]
    if lost:
        raise ValidationError(
            f"downscaling lost all markups for classes {lost}; "
            "use a larger scale or thicker scribbles"
        )
    return CoarseAnnotation.from_labels(labels, target_w, target_h)


def upscale_field(field: ConfidenceField, target_w: int,
                  target_h: int) -> ConfidenceField:
    """Bilinear upsample of every confidence plane back to native size.

    Bilinear blending is convex per pixel, so per-pixel sums across classes
    are preserved.
    """
    if (target_w, target_h) == (field.width, field.height):
        return field
    stack = np.stack([field.alphas[c].reshape(field.height, field.width)
                      for c in field.classes])
    up = bilinear_upsample(FeaturePlanes(stack), target_w, target_h)
    alphas = {c: up.planes[k].ravel() for k, c in enumerate(field.classes)}
    return ConfidenceField(classes=list(field.classes), alphas=alphas,
                           width=target_w, height=target_h)
