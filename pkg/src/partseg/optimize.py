"""One-shot / few-shot optimization of class text embeddings against a frozen backbone."""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch

from .attention import aggregate_cross, aggregate_self, stack_was
from .backbone.base import RANDOM_PROMPT
from .data.augment import AugmentationSpec, augment
from .errors import ClassCountError, ConfigurationError, DivergenceError
from .inference import segment
from .losses import LossBreakdown, ce_loss, ldm_loss, mse_loss, resize_mask

log = logging.getLogger(__name__)

PROMPT_PRESETS = ("part", "empty", "names", "random")


@dataclass
class OptimizationConfig:
    epochs: int = 200
    lr: float = 0.1
    optimizer: str = "adam"
    batch_size: int = 1
    alpha: float = 1.0
    beta: float = 0.005
    t_opt_range: Tuple[int, int] = (5, 100)
    target_size: Tuple[int, int] = (64, 64)
    gate: float = 0.2
    seed: int = 0
    augmentation: Optional[AugmentationSpec] = None
    use_was: bool = True
    # "part" | "empty" | "names" | "random"; anything else is used verbatim
    prompt: str = "part"
    mse_reduction: str = "mean"
    ldm_reduction: str = "mean"
    ce_eps: float = 1e-8
    cross_layers: Optional[List[str]] = None
    self_layers: Optional[List[str]] = None
    # validation-time inference settings
    t_test: int = 100
    inference_seed: int = 0

    def __post_init__(self):
        self.t_opt_range = tuple(int(v) for v in self.t_opt_range)
        self.target_size = tuple(int(v) for v in self.target_size)
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationSpec.from_dict(self.augmentation)
        if self.epochs < 0 or self.lr < 0:
            raise ConfigurationError("epochs and lr must be non-negative")
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        if self.batch_size != 1:
            raise ConfigurationError("only batch_size=1 is supported")
        lo, hi = self.t_opt_range
        if not 0 <= lo <= hi:
            raise ConfigurationError(f"bad t_opt range {self.t_opt_range}")

    def to_dict(self):
        d = asdict(self)
        d["t_opt_range"] = list(self.t_opt_range)
        d["target_size"] = list(self.target_size)
        return d


@dataclass
class OptimizationResult:
    embeddings: object  # PromptEmbeddings
    history: List[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


def prompt_text_for(preset, class_names):
    k = len(class_names)
    if preset == "part":
        return " ".join(["part"] * k)
    if preset == "empty":
        return ""
    if preset == "names":
        return " ".join(n.lower().replace(" ", "_") for n in class_names)
    if preset == "random":
        return RANDOM_PROMPT
    return preset


def initial_embeddings(backbone, class_names, config):
    text = prompt_text_for(config.prompt, class_names)
    return backbone.encode_prompt(text, len(class_names), class_names, seed=config.seed)


def assemble(frozen, trainable, num_classes):
    """Full (T, d) embedding tensor with rows 1..K-1 taken from ``trainable``."""
    return torch.cat([frozen[:1], trainable, frozen[num_classes:]], dim=0)


def compute_losses(emb, latent, mask, backbone, config, t, noise):
    """All loss terms for one (sample, t, noise) draw.

    Returns (LossBreakdown of floats, differentiable total tensor, WAS stack or None).
    """
    k = emb.num_classes
    sample = backbone.add_noise(latent, t, noise=noise)
    probes = backbone.denoise_with_probes(sample, emb)
    a_ca = aggregate_cross(probes, config.target_size, config.cross_layers)
    l_ce = ce_loss(a_ca, mask, k, config.ce_eps)
    was = None
    if config.use_was and config.alpha != 0:
        was = stack_was(a_ca, aggregate_self(probes, config.self_layers), k, config.gate)
        l_mse = mse_loss(was, mask, config.mse_reduction)
    else:
        l_mse = torch.zeros((), dtype=l_ce.dtype)
    l_ldm = ldm_loss(probes, sample, config.ldm_reduction)
    total = l_ce + config.alpha * l_mse + config.beta * l_ldm
    parts = LossBreakdown(l_ce.item(), l_mse.item(), l_ldm.item(), config.alpha, config.beta)
    return parts, total, was


def validation_miou(samples, emb, backbone, config):
    from .eval import IoUAccumulator

    acc = IoUAccumulator(emb.num_classes)
    for s in samples:
        res = segment(s.image, emb, backbone, config.t_test, config.gate, config.use_was,
                      config.inference_seed, config.target_size, config.cross_layers, config.self_layers)
        acc.update(res.labels, s.mask)
    return acc.mean_iou()


def optimize(samples, backbone, config=None, validation=None, init=None):
    """Optimize class embeddings 1..K-1 on annotated samples.

    Every epoch visits every sample once, each visit being one Adam step on
    a fresh augmentation, timestep and noise draw. With ``validation``
    samples the embeddings with the best validation mIoU are returned,
    otherwise the final ones.
    """
    config = config or OptimizationConfig()
    if not samples:
        raise ConfigurationError("at least one training sample is required")
    class_names = list(samples[0].class_names)
    if any(list(s.class_names) != class_names for s in samples):
        raise ClassCountError("training samples disagree on class names")
    k = len(class_names)
    lo, hi = config.t_opt_range
    if hi > backbone.descriptor.t_max:
        raise ConfigurationError(f"t_opt range {config.t_opt_range} exceeds backbone t_max")

    init = init or initial_embeddings(backbone, class_names, config)
    frozen = init.embeddings.detach().to(backbone.dtype).clone()
    trainable = torch.nn.Parameter(frozen[1:k].clone())
    opt = torch.optim.Adam([trainable], lr=config.lr)

    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    digest_before = backbone.parameter_digest()

    static = {}
    if config.augmentation is None or not config.augmentation.enabled:
        for i, s in enumerate(samples):
            static[i] = (backbone.encode_image(backbone.prepare_image(s.image)),
                         resize_mask(s.mask, k, config.target_size))

    history, t_draws = [], []
    best = (-math.inf, None, -1)
    for epoch in range(config.epochs):
        for i, s in enumerate(samples):
            if i in static:
                latent, mask = static[i]
            else:
                aug = augment(s, config.augmentation, int(rng.integers(2 ** 31)))
                latent = backbone.encode_image(backbone.prepare_image(aug.image))
                mask = resize_mask(aug.mask, k, config.target_size)
            t = int(rng.integers(lo, hi + 1))
            noise = torch.randn(latent.shape, generator=gen, dtype=torch.float64).to(latent.data.dtype)
            emb = init.with_embeddings(assemble(frozen, trainable, k))
            parts, total, _ = compute_losses(emb, latent, mask, backbone, config, t, noise)
            if not torch.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, sample {i}",
                    state={"epoch": epoch, "sample": i, "t": t, "losses": parts.to_dict(),
                           "embedding_norm": float(trainable.detach().norm())})
            opt.zero_grad()
            total.backward()
            opt.step()
            record = dict(parts.to_dict(), epoch=epoch, sample=i, t=t)
            history.append(record)
            t_draws.append(t)
        if validation:
            with torch.no_grad():
                emb = init.with_embeddings(assemble(frozen, trainable.detach(), k).clone())
                miou = validation_miou(validation, emb, backbone, config)
            history[-1]["val_miou"] = miou
            if miou > best[0]:
                best = (miou, emb.embeddings.clone(), epoch)
        if history:
            log.debug("epoch %d loss %.5f", epoch, history[-1]["total"])

    if validation and best[1] is not None:
        final = best[1]
    else:
        final = assemble(frozen, trainable.detach(), k).clone()
    result_emb = init.with_embeddings(final)
    if backbone.parameter_digest() != digest_before:
        raise RuntimeError("backbone parameters changed during optimization")

    manifest = {
        "config": config.to_dict(),
        "backbone": backbone.descriptor.to_dict(),
        "backbone_digest": backbone.descriptor.digest,
        "class_names": class_names,
        "num_classes": k,
        "prompt_text": init.prompt_text,
        "train_ids": [s.source_id for s in samples],
        "validation_ids": [s.source_id for s in validation or []],
        "steps": len(history),
        "t_draws": t_draws,
        "final_loss": history[-1] if history else None,
        "best_validation": {"miou": best[0], "epoch": best[2]} if validation and best[1] is not None else None,
        "reductions": {"mse": config.mse_reduction, "ldm": config.ldm_reduction, "ce": "pixel_mean"},
    }
    return OptimizationResult(result_emb, history, manifest)
