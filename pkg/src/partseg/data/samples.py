"""Annotated samples, label-mask files and the prepared-dataset directory layout."""
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import List

import numpy as np
from PIL import Image

from ..errors import FormatError, IngestionError, InputShapeError, LabelRangeError

MANIFEST_NAME = "dataset.json"


@dataclass
class AnnotatedSample:
    image: np.ndarray  # (H, W, 3) uint8 or float in [0, 1]
    mask: np.ndarray  # (H, W) integer labels
    class_names: List[str]
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise InputShapeError(f"image must be HxWx3, got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise InputShapeError(f"image {self.image.shape[:2]} and mask {self.mask.shape} differ")
        if self.mask.size and (self.mask.min() < 0 or self.mask.max() >= len(self.class_names)):
            raise LabelRangeError(f"{self.source_id}: labels outside [0, {len(self.class_names) - 1}]")

    @property
    def num_classes(self):
        return len(self.class_names)


def default_palette(n=256):
    """PASCAL VOC colour map."""
    palette = np.zeros((n, 3), np.uint8)
    for i in range(n):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette[i] = (r, g, b)
    return palette


def write_mask(labels, path):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise FormatError(f"label mask must be 2-D, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise FormatError("labels must fit in 8 bits")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(default_palette().reshape(-1).tolist())
    img.save(path)


def read_mask(path):
    with Image.open(path) as img:
        if img.mode not in ("P", "L"):
            raise FormatError(f"{path}: expected an 8-bit single-channel mask, got mode {img.mode}")
        return np.array(img, dtype=np.uint8).astype(np.int64)


def read_image(path):
    with Image.open(path) as img:
        return np.array(img.convert("RGB"))


def write_image(image, path):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_samples(samples, directory):
    """Write samples as {id}.img.png + {id}.mask.png; returns the ids written."""
    os.makedirs(directory, exist_ok=True)
    ids = []
    for i, s in enumerate(samples):
        sid = s.source_id or f"{i:05d}"
        write_image(s.image, os.path.join(directory, f"{sid}.img.png"))
        write_mask(s.mask, os.path.join(directory, f"{sid}.mask.png"))
        ids.append(sid)
    return ids


def find_manifest(directory):
    """Dataset manifest in ``directory`` or one of its parents up to two levels."""
    d = os.path.abspath(directory)
    for _ in range(3):
        path = os.path.join(d, MANIFEST_NAME)
        if os.path.exists(path):
            with open(path) as f:
                return json.load(f)
        d = os.path.dirname(d)
    return None


def load_samples(directory, class_names=None):
    """Load every {id}.img.png / {id}.mask.png pair in ``directory`` (sorted by id)."""
    if not os.path.isdir(directory):
        raise IngestionError(f"{directory}: not a directory")
    if class_names is None:
        manifest = find_manifest(directory)
        if manifest is None:
            raise IngestionError(f"{directory}: no {MANIFEST_NAME} with class names found")
        class_names = manifest["class_names"]
    ids = sorted(f[: -len(".img.png")] for f in os.listdir(directory) if f.endswith(".img.png"))
    samples = []
    for sid in ids:
        mask_path = os.path.join(directory, f"{sid}.mask.png")
        if not os.path.exists(mask_path):
            raise IngestionError(f"{sid}: image without mask {mask_path}")
        samples.append(AnnotatedSample(read_image(os.path.join(directory, f"{sid}.img.png")),
                                       read_mask(mask_path), list(class_names), sid))
    return samples


def list_images(directory):
    exts = (".png", ".jpg", ".jpeg", ".bmp")
    return sorted(f for f in os.listdir(directory)
                  if f.lower().endswith(exts) and not f.endswith(".mask.png"))


def write_manifest(directory, manifest):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
