"""Small synthetic annotated images for smoke tests and toy runs."""
import numpy as np

from .samples import AnnotatedSample


def two_region_sample(size=64, seed=0, fg=(0.9, 0.55, 0.1), bg=(0.15, 0.3, 0.75), noise=0.03,
                      source_id="two_region"):
    """An ellipse of one colour on a background of another, with light pixel noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = size * 0.55, size * 0.45
    mask = (((yy - cy) / (size * 0.28)) ** 2 + ((xx - cx) / (size * 0.33)) ** 2 <= 1).astype(np.int64)
    image = np.where(mask[..., None] == 1, np.array(fg), np.array(bg))
    image = np.clip(image + rng.normal(0, noise, image.shape), 0, 1)
    image = np.round(image * 255).astype(np.uint8)
    return AnnotatedSample(image, mask, ["background", "object"], source_id)


def multi_region_sample(size=64, seed=0, source_id="multi_region"):
    """Background plus three coloured rectangles (K=4)."""
    rng = np.random.default_rng(seed)
    colours = np.array([(0.1, 0.1, 0.15), (0.85, 0.2, 0.2), (0.2, 0.8, 0.3), (0.9, 0.85, 0.2)])
    mask = np.zeros((size, size), np.int64)
    s = size // 64 or 1
    mask[8 * s:30 * s, 6 * s:40 * s] = 1
    mask[36 * s:58 * s, 10 * s:28 * s] = 2
    mask[30 * s:56 * s, 36 * s:60 * s] = 3
    image = np.clip(colours[mask] + rng.normal(0, 0.03, (size, size, 3)), 0, 1)
    return AnnotatedSample(np.round(image * 255).astype(np.uint8), mask,
                           ["background", "red", "green", "yellow"], source_id)
