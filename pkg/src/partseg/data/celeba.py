"""CelebAMask-HQ preparation: per-part binary masks merged into 10-class 512x512 label maps."""
import os

import numpy as np
from PIL import Image

from ..errors import IngestionError
from .samples import AnnotatedSample, read_image

SIZE = 512
CLASSES = ["Background", "Cloth", "Ear", "Eye", "Eyebrow", "Face", "Hair", "Mouth", "Neck", "Nose"]

# raw part -> class index; left/right variants share a class. Parts absent here
# (eye_g, hat, ear_r, neck_l) are not painted, so whatever lies under them stays.
PART_CLASSES = {
    "skin": 5, "nose": 9, "l_eye": 3, "r_eye": 3, "l_brow": 4, "r_brow": 4, "l_ear": 2, "r_ear": 2,
    "mouth": 7, "u_lip": 7, "l_lip": 7, "hair": 6, "neck": 8, "cloth": 1,
}
# painting order of the reference label generator; later parts overwrite earlier ones
PAINT_ORDER = ["skin", "nose", "eye_g", "l_eye", "r_eye", "l_brow", "r_brow", "l_ear", "r_ear", "mouth",
               "u_lip", "l_lip", "hair", "hat", "ear_r", "neck_l", "neck", "cloth"]


def _resize_mask(m, size):
    if m.shape == (size, size):
        return m
    return np.asarray(Image.fromarray(m.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)) > 127


def merge_parts(part_masks, size=SIZE):
    """{raw part name: (h, w) bool} -> (size, size) uint8 labels over CLASSES."""
    labels = np.zeros((size, size), np.uint8)
    for name in PAINT_ORDER:
        if name in part_masks and name in PART_CLASSES:
            labels[_resize_mask(np.asarray(part_masks[name]).astype(bool), size)] = PART_CLASSES[name]
    return labels


def part_path(anno_root, index, part):
    return os.path.join(anno_root, str(index // 2000), f"{index:05d}_{part}.png")


def read_parts(anno_root, index):
    parts = {}
    for part in PAINT_ORDER:
        path = part_path(anno_root, index, part)
        if os.path.exists(path):
            arr = np.asarray(Image.open(path))
            parts[part] = (arr[..., 0] if arr.ndim == 3 else arr) > 0
    return parts


def prepare_celeba(raw_root, indices, required_parts=(), size=SIZE):
    """Label maps for the given image indices of a CelebAMask-HQ tree.

    ``raw_root`` holds ``CelebA-HQ-img/{i}.jpg`` and
    ``CelebAMask-HQ-mask-anno/{i // 2000}/{i:05d}_{part}.png``. Any missing
    image or missing ``required_parts`` file raises IngestionError naming all gaps.
    """
    img_root = os.path.join(raw_root, "CelebA-HQ-img")
    anno_root = os.path.join(raw_root, "CelebAMask-HQ-mask-anno")
    gaps = []
    for i in indices:
        if not any(os.path.exists(os.path.join(img_root, f"{i}{e}")) for e in (".jpg", ".png")):
            gaps.append(f"{i}: image")
        gaps += [f"{i}: {p}" for p in required_parts if not os.path.exists(part_path(anno_root, i, p))]
    if gaps:
        raise IngestionError("missing CelebAMask-HQ files: " + ", ".join(gaps))
    samples = []
    for i in indices:
        img_path = next(os.path.join(img_root, f"{i}{e}") for e in (".jpg", ".png")
                        if os.path.exists(os.path.join(img_root, f"{i}{e}")))
        image = read_image(img_path)
        if image.shape[:2] != (size, size):
            image = np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))
        samples.append(AnnotatedSample(image, merge_parts(read_parts(anno_root, i), size), list(CLASSES),
                                       f"{i:05d}"))
    return samples


def list_indices(raw_root):
    img_root = os.path.join(raw_root, "CelebA-HQ-img")
    if not os.path.isdir(img_root):
        raise IngestionError(f"{raw_root}: missing CelebA-HQ-img directory")
    return sorted(int(os.path.splitext(f)[0]) for f in os.listdir(img_root)
                  if os.path.splitext(f)[0].isdigit())
