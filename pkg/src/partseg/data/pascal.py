"""PASCAL-Part car/horse preparation: per-instance crops with overlap and size filtering.

Raw parts are collapsed into the evaluation classes by the table in
``pascal_part_map.json`` (fnmatch patterns per class, first match wins; raw
parts matching nothing stay background). Pass ``part_map`` to override it.
"""
import fnmatch
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..errors import ConfigurationError, IngestionError
from .samples import AnnotatedSample, read_image

MAP_PATH = os.path.join(os.path.dirname(__file__), "pascal_part_map.json")
CATEGORIES = ("car", "horse")


@dataclass
class RawObject:
    category: str
    mask: np.ndarray  # (H, W) bool, whole instance
    parts: Dict[str, np.ndarray] = field(default_factory=dict)  # raw part name -> (H, W) bool
    box: Optional[tuple] = None  # (x0, y0, x1, y1), ends exclusive; derived from mask when None

    def __post_init__(self):
        if self.box is None:
            self.box = mask_box(self.mask)


@dataclass
class RawImage:
    image_id: str
    image: np.ndarray
    objects: List[RawObject]


def load_part_map(path=MAP_PATH):
    with open(path) as f:
        return json.load(f)


def mask_box(mask):
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return (0, 0, 0, 0)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def box_area(box):
    x0, y0, x1, y1 = box
    return max(0, x1 - x0) * max(0, y1 - y0)


def intersection(a, b):
    return box_area((max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3])))


def overlap_ratio(candidate, other, denominator="own"):
    """Intersection over the candidate's own box area (or over the union with ``denominator="union"``)."""
    inter = intersection(candidate, other)
    if denominator == "own":
        denom = box_area(candidate)
    elif denominator == "union":
        denom = box_area(candidate) + box_area(other) - inter
    else:
        raise ConfigurationError(f"unknown overlap denominator {denominator!r}")
    return inter / denom if denom > 0 else 0.0


def overlapping(boxes, threshold=0.05, denominator="own"):
    """Indices of boxes whose overlap with any other box exceeds ``threshold``."""
    out = []
    for i, a in enumerate(boxes):
        if any(overlap_ratio(a, b, denominator) > threshold for j, b in enumerate(boxes) if j != i):
            out.append(i)
    return out


def too_small(box, min_size):
    """Strictly smaller than min_size in width or height."""
    x0, y0, x1, y1 = box
    return (x1 - x0) < min_size or (y1 - y0) < min_size


def part_class(part_name, spec):
    """Class index of a raw part name, 0 when no pattern matches."""
    for idx, cls in enumerate(spec["classes"]):
        for pattern in spec["parts"].get(cls, []):
            if fnmatch.fnmatchcase(part_name, pattern):
                return idx
    return 0


def remap_parts(obj, spec, box):
    x0, y0, x1, y1 = box
    labels = np.zeros((y1 - y0, x1 - x0), np.uint8)
    for name in sorted(obj.parts):
        cls = part_class(name, spec)
        if cls:
            labels[obj.parts[name][y0:y1, x0:x1].astype(bool)] = cls
    return labels


def prepare_pascal_part(raw_images, category, overlap_threshold=0.05, denominator="own", min_size=None,
                        part_map=None):
    """Crop every ``category`` instance, dropping overlapping and undersized ones.

    Overlap is checked against every other annotated object in the same
    image, whatever its category. Returns (samples, filter statistics).
    """
    if category not in CATEGORIES:
        raise ConfigurationError(f"unknown PASCAL-Part category {category!r}; expected one of {CATEGORIES}")
    spec = (part_map or load_part_map())[category]
    min_size = spec["min_size"] if min_size is None else min_size
    stats = {"images": 0, "candidates": 0, "removed_overlap": 0, "removed_size": 0, "kept": 0}
    samples = []
    for raw in raw_images:
        stats["images"] += 1
        boxes = [o.box for o in raw.objects]
        crowded = set(overlapping(boxes, overlap_threshold, denominator))
        for i, obj in enumerate(raw.objects):
            if obj.category != category:
                continue
            stats["candidates"] += 1
            if i in crowded:
                stats["removed_overlap"] += 1
                continue
            if too_small(obj.box, min_size):
                stats["removed_size"] += 1
                continue
            x0, y0, x1, y1 = obj.box
            image = np.ascontiguousarray(raw.image[y0:y1, x0:x1])
            samples.append(AnnotatedSample(image, remap_parts(obj, spec, obj.box), list(spec["classes"]),
                                           f"{raw.image_id}_{i}", {"box": list(obj.box)}))
            stats["kept"] += 1
    return samples, stats


def _as_list(x):
    if isinstance(x, np.ndarray) and x.dtype == object:
        return list(x.reshape(-1))
    return [x]


def read_part_annotation(mat_path, image_path):
    """Read one PASCAL-Part ``Annotations_Part/*.mat`` file with its JPEG."""
    from scipy.io import loadmat

    try:
        anno = loadmat(mat_path, squeeze_me=True, struct_as_record=False)["anno"]
    except (OSError, KeyError, ValueError) as e:
        raise IngestionError(f"{mat_path}: unreadable part annotation ({e})") from None
    objects = []
    for o in _as_list(anno.objects):
        parts = {}
        raw_parts = getattr(o, "parts", None)
        if isinstance(raw_parts, np.ndarray) and raw_parts.size == 0:
            raw_parts = None
        if raw_parts is not None:
            for p in _as_list(raw_parts):
                parts[str(p.part_name)] = np.asarray(p.mask).astype(bool)
        objects.append(RawObject(str(getattr(o, "class")),
                                 np.asarray(o.mask).astype(bool), parts))
    return RawImage(os.path.splitext(os.path.basename(mat_path))[0], read_image(image_path), objects)


def read_pascal_part(root):
    """Iterate raw images under ``root`` (``Annotations_Part/*.mat`` + ``JPEGImages/*.jpg``)."""
    anno_dir = os.path.join(root, "Annotations_Part")
    img_dir = os.path.join(root, "JPEGImages")
    if not os.path.isdir(anno_dir):
        raise IngestionError(f"{root}: missing Annotations_Part directory")
    for name in sorted(os.listdir(anno_dir)):
        if not name.endswith(".mat"):
            continue
        stem = name[:-4]
        img = next((os.path.join(img_dir, stem + e) for e in (".jpg", ".png")
                    if os.path.exists(os.path.join(img_dir, stem + e))), None)
        if img is None:
            raise IngestionError(f"{stem}: annotation without image in {img_dir}")
        yield read_part_annotation(os.path.join(anno_dir, name), img)
