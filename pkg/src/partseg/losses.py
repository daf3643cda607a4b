"""Loss terms for embedding optimization: weighted CE on cross attention, MSE on WAS maps,
and the denoising loss used as a regularizer."""
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .attention import resize_maps
from .errors import InputShapeError, LabelRangeError

REDUCTIONS = ("sum", "mean")


@dataclass
class ResizedMask:
    labels: torch.Tensor  # (H'', W'') int64
    planes: torch.Tensor  # (K, H'', W'') binary, float64
    counts: torch.Tensor  # (K,) int64

    @property
    def num_classes(self):
        return self.planes.shape[0]

    @property
    def size(self):
        return tuple(self.labels.shape)


@dataclass
class LossBreakdown:
    l_ce: float
    l_mse: float
    l_ldm: float
    alpha: float
    beta: float

    @property
    def total(self):
        return self.l_ce + self.alpha * self.l_mse + self.beta * self.l_ldm

    def to_dict(self):
        d = asdict(self)
        d["total"] = self.total
        return d


def resize_mask(mask, num_classes, target=(64, 64)):
    """Nearest-neighbour label resize plus per-class binary planes and pixel counts."""
    labels = torch.as_tensor(np.asarray(mask)).long()
    if labels.ndim != 2:
        raise InputShapeError(f"mask must be 2-D, got shape {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(f"mask labels must lie in [0, {num_classes - 1}]")
    target = tuple(int(s) for s in target)
    if tuple(labels.shape) != target:
        # integer labels must never be interpolated; nearest-exact samples pixel centres
        labels = F.interpolate(labels[None, None].double(), size=target, mode="nearest-exact")[0, 0].long()
    planes = F.one_hot(labels, num_classes).permute(2, 0, 1).double()
    counts = planes.sum(dim=(1, 2)).long()
    return ResizedMask(labels, planes, counts)


def class_weights(mask):
    """total_pixels / count_c per class, 0 for classes absent from the mask."""
    total = mask.labels.numel()
    counts = mask.counts.double()
    return torch.where(counts > 0, total / counts.clamp(min=1), torch.zeros_like(counts))


def ce_loss(a_ca, mask, num_classes, eps=1e-8):
    """Pixel-mean of class-weighted cross-entropy between the first K cross-attention
    channels (renormalized per pixel) and the resized labels."""
    if tuple(a_ca.shape[:2]) != mask.size:
        raise InputShapeError(f"cross map {tuple(a_ca.shape[:2])} vs mask {mask.size}")
    p = a_ca[..., :num_classes]
    p = p / p.sum(dim=-1, keepdim=True).clamp(min=eps)
    nll = -p.clamp(min=eps).log().gather(-1, mask.labels[..., None].to(p.device))[..., 0]
    w = class_weights(mask).to(p.dtype)[mask.labels]
    return (w * nll).mean()


def mse_loss(was, mask, reduction="sum"):
    """Squared error between WAS maps (resized to the mask grid) and per-class binary planes,
    summed over classes. ``reduction`` applies over pixels: "sum" is the squared L2 norm."""
    maps = was.maps if hasattr(was, "maps") else was
    if maps.shape[0] != mask.num_classes:
        raise InputShapeError(f"{maps.shape[0]} WAS maps for {mask.num_classes} classes")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    up = resize_maps(maps, mask.size)
    sq = (up - mask.planes.to(up.dtype)) ** 2
    per_class = sq.sum(dim=(1, 2)) if reduction == "sum" else sq.mean(dim=(1, 2))
    return per_class.sum()


def ldm_loss(predicted_noise, sample, reduction="mean"):
    """Denoising loss between the drawn noise and the denoiser's prediction."""
    pred = predicted_noise.predicted_noise if hasattr(predicted_noise, "predicted_noise") else predicted_noise
    noise = sample.noise if hasattr(sample, "noise") else sample
    if pred.shape != noise.shape:
        raise InputShapeError(f"predicted noise {tuple(pred.shape)} vs noise {tuple(noise.shape)}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    sq = (noise.to(pred.dtype) - pred) ** 2
    return sq.sum() if reduction == "sum" else sq.mean()
