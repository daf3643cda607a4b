"""Seeded paired image/mask augmentation.

Geometric ops move image and mask together; the mask is only ever resampled
with nearest neighbour and is never blurred.
"""
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from ..errors import ConfigurationError
from .samples import AnnotatedSample


@dataclass
class AugmentationSpec:
    horizontal_flip: bool = False
    gaussian_blur: bool = False
    crop_ratio_range: Optional[Tuple[float, float]] = None  # fraction of image area kept
    rotation_degrees: float = 0.0
    flip_p: float = 0.5
    blur_p: float = 0.5
    blur_sigma: Tuple[float, float] = (0.1, 2.0)
    blur_kernel: int = 5

    def __post_init__(self):
        if self.crop_ratio_range is not None:
            lo, hi = self.crop_ratio_range
            if not 0 < lo <= hi <= 1:
                raise ConfigurationError(f"crop ratio range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
            self.crop_ratio_range = (float(lo), float(hi))
        if self.rotation_degrees < 0:
            raise ConfigurationError("rotation_degrees must be >= 0")
        if self.blur_kernel % 2 != 1:
            raise ConfigurationError("blur kernel must be odd")

    @property
    def enabled(self):
        return (self.horizontal_flip or self.gaussian_blur or self.crop_ratio_range is not None
                or self.rotation_degrees > 0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("crop_ratio_range", "blur_sigma"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


PRESETS = {
    "none": AugmentationSpec(),
    "car": AugmentationSpec(True, True, (0.5, 1.0), 30.0),
    "horse": AugmentationSpec(True, True, (0.8, 1.0), 30.0),
    "face": AugmentationSpec(True, True, (0.6, 1.0), 10.0),
}


def nearest_resize(labels, size):
    """Nearest-neighbour resample sampling source pixel centres: src = floor((i + 0.5) * in / out)."""
    h, w = labels.shape
    oh, ow = size
    rows = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(np.int64), w - 1)
    return labels[rows[:, None], cols[None, :]]


def bilinear_resize(image, size):
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    return x[0].numpy().transpose(1, 2, 0)


def _as_float(image):
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def augment(sample, spec, seed):
    """Apply flip -> crop-and-resize-back -> rotation -> blur, each drawn from ``seed``."""
    if spec is None or not spec.enabled:
        return sample
    rng = np.random.default_rng(seed)
    image, mask = sample.image, sample.mask
    src_dtype = image.dtype
    h, w = mask.shape
    ops = []

    if spec.horizontal_flip and rng.random() < spec.flip_p:
        image, mask = image[:, ::-1], mask[:, ::-1]
        ops.append("flip")

    if spec.crop_ratio_range is not None:
        ratio = rng.uniform(*spec.crop_ratio_range)
        ch = min(h, max(1, int(round(h * np.sqrt(ratio)))))
        cw = min(w, max(1, int(round(w * np.sqrt(ratio)))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        if (ch, cw) != (h, w):
            image = bilinear_resize(_as_float(image[top:top + ch, left:left + cw]), (h, w))
            mask = nearest_resize(mask[top:top + ch, left:left + cw], (h, w))
        ops.append(f"crop:{top},{left},{ch},{cw}")

    if spec.rotation_degrees > 0:
        angle = rng.uniform(-spec.rotation_degrees, spec.rotation_degrees)
        image = ndimage.rotate(_as_float(image), angle, axes=(1, 0), reshape=False, order=1,
                               mode="constant", cval=0.0)
        mask = ndimage.rotate(mask, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
        ops.append(f"rotate:{angle:.4f}")

    if spec.gaussian_blur and rng.random() < spec.blur_p:
        sigma = rng.uniform(*spec.blur_sigma)
        r = spec.blur_kernel // 2
        image = ndimage.gaussian_filter(_as_float(image), sigma=(sigma, sigma, 0), radius=(r, r, 0),
                                        mode="reflect")
        ops.append(f"blur:{sigma:.4f}")

    image = np.clip(image, 0.0, 1.0) if image.dtype != src_dtype else image
    if src_dtype == np.uint8 and image.dtype != np.uint8:
        image = np.round(image * 255).astype(np.uint8)
    meta = dict(sample.meta, augment=ops)
    return AnnotatedSample(np.ascontiguousarray(image), np.ascontiguousarray(mask),
                           sample.class_names, sample.source_id, meta)
