"""Annotated samples, dataset preparation, splits and augmentation."""
from .augment import PRESETS, AugmentationSpec, augment
from .samples import AnnotatedSample, load_samples, read_mask, save_samples, write_mask
from .split import sample_split

__all__ = ["PRESETS", "AnnotatedSample", "AugmentationSpec", "augment", "load_samples", "read_mask",
           "sample_split", "save_samples", "write_mask"]
