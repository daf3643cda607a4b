"""Backbone-facing data types and the abstract diffusion-model interface."""
import abc
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ClassCountError, ConfigurationError, InputShapeError

RANDOM_PROMPT = "RANDOM"


@dataclass
class LatentImage:
    data: torch.Tensor  # (C, H, W)
    scale: float  # input pixels per latent cell

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[1] == 0 or self.data.shape[2] == 0:
            raise InputShapeError(f"latent must be (C, H, W) with H, W > 0, got {tuple(self.data.shape)}")

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class NoisySample:
    noisy: LatentImage
    noise: torch.Tensor
    timestep: int


@dataclass
class PromptEmbeddings:
    embeddings: torch.Tensor  # (T_tok, d_txt)
    num_classes: int
    class_names: List[str]
    prompt_text: str = ""
    backbone_digest: Optional[str] = None

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise InputShapeError("embeddings must be (tokens, dim)")
        if not 1 <= self.num_classes <= self.embeddings.shape[0]:
            raise ClassCountError(
                f"K={self.num_classes} does not fit a token capacity of {self.embeddings.shape[0]}")
        if len(self.class_names) != self.num_classes:
            raise ClassCountError(f"{len(self.class_names)} class names for K={self.num_classes}")

    @property
    def optimizable_indices(self):
        return list(range(1, self.num_classes))

    @property
    def token_capacity(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def with_embeddings(self, embeddings):
        return PromptEmbeddings(embeddings, self.num_classes, list(self.class_names), self.prompt_text,
                                self.backbone_digest)


@dataclass
class AttentionProbeSet:
    """Normalized attention captured during one denoiser pass.

    Cross maps are (H', W', T) and self maps (H', W', H', W'); either may
    carry a leading heads axis, which the attention module averages out.
    """
    cross: Dict[str, torch.Tensor]
    self_: Dict[str, torch.Tensor]
    predicted_noise: torch.Tensor


@dataclass(frozen=True)
class BackboneDescriptor:
    name: str
    cross_attention_layer_ids: Tuple[str, ...]
    self_attention_layer_ids: Tuple[str, ...]
    latent_shape: Tuple[int, int, int]
    input_size: int
    token_capacity: int
    t_max: int
    parameter_digest: str
    extra: Dict[str, str] = field(default_factory=dict, compare=False, hash=False)

    def to_dict(self):
        d = asdict(self)
        d["cross_attention_layer_ids"] = list(self.cross_attention_layer_ids)
        d["self_attention_layer_ids"] = list(self.self_attention_layer_ids)
        d["latent_shape"] = list(self.latent_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            cross_attention_layer_ids=tuple(d["cross_attention_layer_ids"]),
            self_attention_layer_ids=tuple(d["self_attention_layer_ids"]),
            latent_shape=tuple(d["latent_shape"]),
            input_size=int(d["input_size"]),
            token_capacity=int(d["token_capacity"]),
            t_max=int(d["t_max"]),
            parameter_digest=d["parameter_digest"],
            extra=dict(d.get("extra", {})),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @property
    def digest(self):
        """Identity of (architecture, probe layout, frozen weights)."""
        d = self.to_dict()
        d.pop("extra")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def parameter_digest(module):
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def image_to_tensor(image, dtype=torch.float32):
    """HxWx3 uint8 or [0, 1] float array -> (3, H, W) tensor in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputShapeError(f"expected an HxWx3 RGB image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)


def resize_image(image, size):
    """Bilinear resize of an HxWx3 array to size x size (returns float in [0, 1])."""
    x = image_to_tensor(image, torch.float64)
    if x.shape[1:] == (size, size):
        return x.permute(1, 2, 0).numpy()
    x = F.interpolate(x[None], size=(size, size), mode="bilinear", align_corners=False)[0]
    return x.clamp(0, 1).permute(1, 2, 0).numpy()


class Backbone(abc.ABC):
    """A frozen text-conditioned latent diffusion model with attention taps."""

    name = "abstract"

    @property
    @abc.abstractmethod
    def descriptor(self) -> BackboneDescriptor:
        ...

    @abc.abstractmethod
    def parameter_digest(self) -> str:
        """Hash of the frozen weights, recomputed on every call."""

    @property
    def input_size(self):
        return self.descriptor.input_size

    @property
    def dtype(self):
        return torch.float32

    @abc.abstractmethod
    def encode_image(self, image) -> LatentImage:
        ...

    @abc.abstractmethod
    def add_noise(self, latent: LatentImage, t: int, noise: Optional[torch.Tensor] = None,
                  generator: Optional[torch.Generator] = None) -> NoisySample:
        ...

    @abc.abstractmethod
    def denoise_with_probes(self, sample: NoisySample, prompt: PromptEmbeddings) -> AttentionProbeSet:
        ...

    @abc.abstractmethod
    def encode_prompt(self, prompt_text: str, num_classes: int, class_names=None,
                      seed: int = 0) -> PromptEmbeddings:
        ...

    def prepare_image(self, image):
        """Resize an arbitrary RGB image to the backbone's input resolution."""
        return resize_image(image, self.input_size)

    def _check_prompt(self, prompt):
        cap = self.descriptor.token_capacity
        if prompt.embeddings.shape[0] != cap:
            raise InputShapeError(
                f"prompt has {prompt.embeddings.shape[0]} embeddings, backbone expects {cap}")

    def _check_probes(self, probes):
        d = self.descriptor
        missing = [i for i in d.cross_attention_layer_ids if i not in probes.cross]
        missing += [i for i in d.self_attention_layer_ids if i not in probes.self_]
        if missing:
            raise ConfigurationError(f"probe layers not captured: {missing}")

    @staticmethod
    def _class_names(class_names, num_classes):
        if class_names is None:
            return ["background"] + [f"class_{i}" for i in range(1, num_classes)]
        return list(class_names)
