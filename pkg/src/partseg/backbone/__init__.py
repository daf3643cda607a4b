"""Frozen diffusion backbones: the abstract interface, a toy model and the SD 2.1 adapter."""
from ..errors import ConfigurationError
from .base import (RANDOM_PROMPT, AttentionProbeSet, Backbone, BackboneDescriptor, LatentImage,
                   NoisySample, PromptEmbeddings)
from .scheduler import DDPMSchedule
from .toy import ToyBackbone

BACKBONES = ("toy", "sd21")


def build_backbone(name, **options):
    """Instantiate a backbone by config key (``toy`` or ``sd21``)."""
    if name == "toy":
        return ToyBackbone(**options)
    if name == "sd21":
        from .sd21 import SD21Backbone

        return SD21Backbone(**options)
    raise ConfigurationError(f"unknown backbone {name!r}; expected one of {BACKBONES}")


__all__ = ["RANDOM_PROMPT", "AttentionProbeSet", "Backbone", "BackboneDescriptor", "DDPMSchedule",
           "LatentImage", "NoisySample", "PromptEmbeddings", "ToyBackbone", "build_backbone"]
