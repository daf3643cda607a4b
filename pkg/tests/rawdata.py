"""Builders for tiny raw dataset trees in the on-disk layouts the readers expect."""
import numpy as np
from PIL import Image
from scipy.io import savemat


def box_mask(box, size):
    m = np.zeros(size, np.uint8)
    x0, y0, x1, y1 = box
    m[y0:y1, x0:x1] = 1
    return m


def struct_array(records, fields):
    arr = np.zeros((1, len(records)), dtype=[(f, object) for f in fields])
    for i, r in enumerate(records):
        for f in fields:
            arr[0, i][f] = r[f]
    return arr


def write_pascal_image(root, image_id, objects, size=(120, 160)):
    """``objects``: list of (category, box, {part_name: box})."""
    (root / "Annotations_Part").mkdir(parents=True, exist_ok=True)
    (root / "JPEGImages").mkdir(exist_ok=True)
    rng = np.random.default_rng(len(image_id))
    Image.fromarray(rng.integers(0, 256, size + (3,), dtype=np.uint8)).save(root / "JPEGImages" / f"{image_id}.jpg")
    records = []
    for category, box, parts in objects:
        prec = [{"part_name": n, "mask": box_mask(b, size)} for n, b in parts.items()]
        records.append({"class": category, "class_ind": 1, "mask": box_mask(box, size),
                        "parts": struct_array(prec, ["part_name", "mask"]) if prec else np.zeros((0, 0))})
    savemat(str(root / "Annotations_Part" / f"{image_id}.mat"),
            {"anno": {"imname": image_id, "objects": struct_array(records, ["class", "class_ind", "mask", "parts"])}})
