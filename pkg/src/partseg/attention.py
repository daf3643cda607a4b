"""Cross/self attention aggregation and weighted accumulated self-attention (WAS) maps."""
import os
from dataclasses import dataclass
from typing import List

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AggregationError, ClassCountError, InputShapeError


@dataclass
class WASMapStack:
    maps: torch.Tensor  # (K, h, w)
    gate_passed: List[bool]

    @property
    def num_classes(self):
        return self.maps.shape[0]


def resize_maps(maps, size):
    """Bilinear (align_corners=False) resize of (N, H, W) maps to size=(H2, W2)."""
    size = tuple(int(s) for s in size)
    if tuple(maps.shape[-2:]) == size:
        return maps
    return F.interpolate(maps[None], size=size, mode="bilinear", align_corners=False)[0]


def _mean_heads(x, base_ndim):
    if x.ndim == base_ndim + 1:
        return x.mean(dim=0)
    if x.ndim != base_ndim:
        raise AggregationError(f"attention map of rank {x.ndim}, expected {base_ndim} (+ heads)")
    return x


def _select(maps, layer_ids):
    if hasattr(maps, "items"):
        if layer_ids is None:
            return list(maps.values())
        missing = [i for i in layer_ids if i not in maps]
        if missing:
            raise AggregationError(f"no probe for layers {missing}")
        return [maps[i] for i in layer_ids]
    return list(maps)


def aggregate_cross(probes, target=(64, 64), layer_ids=None):
    """Average of per-layer cross-attention maps after resizing each to ``target``.

    ``probes`` is an AttentionProbeSet, a {layer: map} dict or a list of maps
    shaped (H', W', T) or (heads, H', W', T). Returns (H'', W'', T).
    """
    maps = probes.cross if hasattr(probes, "cross") else probes
    maps = _select(maps, layer_ids)
    if not maps:
        raise AggregationError("no cross-attention probes to aggregate")
    acc = None
    for m in maps:
        m = _mean_heads(m, 3)
        r = resize_maps(m.permute(2, 0, 1), target)
        acc = r if acc is None else acc + r
    return (acc / len(maps)).permute(1, 2, 0)


def aggregate_self(probes, layer_ids=None):
    """Elementwise mean of per-layer self-attention maps, (h, w, h, w)."""
    maps = probes.self_ if hasattr(probes, "self_") else probes
    maps = [_mean_heads(m, 4) for m in _select(maps, layer_ids)]
    if not maps:
        raise AggregationError("no self-attention probes to aggregate")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise AggregationError(f"self-attention shapes differ: {[tuple(m.shape) for m in maps]}")
    return torch.stack(maps).mean(dim=0)


def _check_self(a_sa):
    if a_sa.ndim != 4 or a_sa.shape[:2] != a_sa.shape[2:]:
        raise InputShapeError(f"self-attention must be (h, w, h, w), got {tuple(a_sa.shape)}")


def compose_was(a_ca_k, a_sa, gate=0.2):
    """WAS map for one class channel.

    The (H'', W'') cross map is resized to the self-attention grid, then each
    query's self-attention row is weighted by the resized cross value at that
    query and the rows are summed. Returns (map (h, w), gate_passed); a class
    whose cross map never exceeds ``gate`` gets an all-zero map.
    """
    _check_self(a_sa)
    if a_ca_k.ndim != 2:
        raise InputShapeError(f"cross map must be 2-D, got {tuple(a_ca_k.shape)}")
    h, w = a_sa.shape[:2]
    if not bool(a_ca_k.max() > gate):
        return torch.zeros(h, w, dtype=a_sa.dtype), False
    r = resize_maps(a_ca_k[None], (h, w))[0]
    return (r.reshape(-1) @ a_sa.reshape(h * w, h * w)).reshape(h, w), True


def stack_was(a_ca, a_sa, num_classes, gate=0.2):
    """WAS maps for token channels 0..K-1 of an aggregated (H'', W'', T) cross map."""
    _check_self(a_sa)
    if num_classes > a_ca.shape[-1]:
        raise ClassCountError(f"K={num_classes} exceeds {a_ca.shape[-1]} token channels")
    h, w = a_sa.shape[:2]
    cross = a_ca[..., :num_classes].permute(2, 0, 1)
    passed = [bool(v > gate) for v in cross.reshape(num_classes, -1).max(dim=1).values]
    r = resize_maps(cross, (h, w)).reshape(num_classes, h * w)
    maps = (r @ a_sa.reshape(h * w, h * w)).reshape(num_classes, h, w)
    keep = torch.tensor(passed, dtype=maps.dtype).reshape(-1, 1, 1)
    return WASMapStack(maps * keep, passed)


def _to_uint8(m):
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, np.uint8)
    return np.round((m - lo) / (hi - lo) * 255).astype(np.uint8)


def emit_attention_maps(run_dir, group, maps, class_names):
    """Write (K, H, W) maps as 8-bit min-max normalized PNGs at {run}/{group}/{class}.png."""
    from PIL import Image

    out = os.path.join(run_dir, group)
    os.makedirs(out, exist_ok=True)
    maps = maps.detach().cpu().numpy() if torch.is_tensor(maps) else np.asarray(maps)
    paths = []
    for name, m in zip(class_names, maps):
        path = os.path.join(out, f"{name}.png")
        Image.fromarray(_to_uint8(m), mode="L").save(path)
        paths.append(path)
    return paths
