"""Segmenting unseen images with optimized class embeddings."""
import hashlib
from dataclasses import dataclass, field
from typing import List

import numpy as np
import torch

from .attention import aggregate_cross, aggregate_self, resize_maps, stack_was
from .errors import CompatibilityError, InputShapeError


@dataclass
class SegmentationResult:
    labels: np.ndarray  # (H, W) int64
    scores: np.ndarray  # (K, H, W)
    gate_passed: List[bool]
    provenance: dict = field(default_factory=dict)


def argmax_labels(scores):
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    return np.argmax(np.asarray(scores), axis=0).astype(np.int64)


def embedding_digest(emb):
    return hashlib.sha256(emb.embeddings.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def check_compatible(emb, backbone):
    d = backbone.descriptor
    if emb.embeddings.shape[0] != d.token_capacity:
        raise CompatibilityError(
            f"embeddings have {emb.embeddings.shape[0]} tokens, backbone {d.name} takes {d.token_capacity}")
    digest = getattr(emb, "backbone_digest", None)
    if digest is not None and digest != d.digest:
        raise CompatibilityError(f"embeddings were produced for a different backbone than {d.name}")


def class_maps(image, emb, backbone, t_test=100, gate=0.2, use_was=True, seed=0, target=(64, 64),
               cross_layers=None, self_layers=None, noise=None):
    """Per-class score maps at attention resolution for one image, plus gate flags.

    With ``use_was`` the maps are WAS maps on the self-attention grid;
    otherwise the raw aggregated cross-attention channels on the ``target`` grid.
    """
    latent = backbone.encode_image(backbone.prepare_image(image))
    if noise is None:
        g = torch.Generator().manual_seed(int(seed))
        noise = torch.randn(latent.shape, generator=g, dtype=torch.float64).to(latent.data.dtype)
    sample = backbone.add_noise(latent, t_test, noise=noise)
    k = emb.num_classes
    with torch.no_grad():
        probes = backbone.denoise_with_probes(sample, emb)
        a_ca = aggregate_cross(probes, target, cross_layers)
        flags = [bool(v > gate) for v in a_ca[..., :k].reshape(-1, k).max(dim=0).values]
        if not use_was:
            return a_ca[..., :k].permute(2, 0, 1), flags
        was = stack_was(a_ca, aggregate_self(probes, self_layers), k, gate)
    return was.maps, was.gate_passed


def segment(image, emb, backbone, t_test=100, gate=0.2, use_was=True, seed=0, target=(64, 64),
            cross_layers=None, self_layers=None):
    check_compatible(emb, backbone)
    image = np.asarray(image)
    h, w = image.shape[:2]
    maps, flags = class_maps(image, emb, backbone, t_test, gate, use_was, seed, target,
                             cross_layers, self_layers)
    scores = resize_maps(maps.double(), (h, w)).cpu().numpy()
    return SegmentationResult(
        labels=argmax_labels(scores),
        scores=scores,
        gate_passed=flags,
        provenance={"t_test": int(t_test), "gate": float(gate), "use_was": bool(use_was),
                    "seed": int(seed), "backbone": backbone.descriptor.name,
                    "backbone_digest": backbone.descriptor.digest, "embeddings_sha256": embedding_digest(emb),
                    "patches": None},
    )


def patch_offsets(image_size, patch, layout=4):
    """Top-left anchors of a square grid of ``layout`` patches spanning the image edge to edge."""
    per_axis = int(round(layout ** 0.5))
    if per_axis ** 2 != layout:
        raise ValueError(f"layout must be a square number of patches, got {layout}")
    if patch >= image_size:
        return [(0, 0)]
    starts = sorted({int(round(v)) for v in np.linspace(0, image_size - patch, per_axis)})
    return [(r, c) for r in starts for c in starts]


def coverage_map(image_size, patch, layout=4):
    cov = np.zeros((image_size, image_size), np.int64)
    for r, c in patch_offsets(image_size, patch, layout):
        cov[r:r + patch, c:c + patch] += 1
    return cov


def segment_patched(image, emb, backbone, patch=400, layout=4, image_size=512, **kwargs):
    """Segment a large square image from overlapping patches.

    Each patch is segmented on its own; its class score maps are pasted into
    an image-sized accumulator and overlaps are averaged by coverage count
    before the argmax.
    """
    image = np.asarray(image)
    if image.shape[:2] != (image_size, image_size):
        raise InputShapeError(f"patched inference expects {image_size}x{image_size}, got {image.shape[:2]}")
    if patch >= image_size:
        res = segment(image, emb, backbone, **kwargs)
        res.provenance["patches"] = {"size": patch, "offsets": [[0, 0]]}
        return res
    k = emb.num_classes
    acc = np.zeros((k, image_size, image_size))
    cov = np.zeros((image_size, image_size))
    flags = [False] * k
    offsets = patch_offsets(image_size, patch, layout)
    prov = None
    for r, c in offsets:
        res = segment(image[r:r + patch, c:c + patch], emb, backbone, **kwargs)
        acc[:, r:r + patch, c:c + patch] += res.scores
        cov[r:r + patch, c:c + patch] += 1
        flags = [a or b for a, b in zip(flags, res.gate_passed)]
        prov = res.provenance
    scores = acc / cov
    prov = dict(prov, patches={"size": patch, "offsets": [list(o) for o in offsets]})
    return SegmentationResult(argmax_labels(scores), scores, flags, prov)


def render_overlay(image, result, palette=None, alpha=0.5, background_transparent=True):
    """Alpha-blend class colours over an RGB image; returns uint8 HxWx3."""
    from .data.samples import default_palette

    labels = result.labels if hasattr(result, "labels") else np.asarray(result)
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    palette = default_palette() if palette is None else np.asarray(palette, np.uint8)
    if labels.size and labels.max() >= len(palette):
        raise ValueError(f"palette has {len(palette)} colours, labels go up to {labels.max()}")
    blended = np.round((1 - alpha) * img.astype(np.float64) + alpha * palette[labels].astype(np.float64))
    out = blended.astype(np.uint8)
    if background_transparent:
        out[labels == 0] = img[labels == 0]
    return out
