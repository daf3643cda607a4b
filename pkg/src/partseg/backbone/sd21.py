"""Stable Diffusion 2.1 adapter (requires ``diffusers`` and local weights).

Attention layers are numbered 1..16 in execution order over the UNet's
transformer blocks (down, mid, up). Block ``n`` exposes ``L{n:02d}.cross``
(attn2) and ``L{n:02d}.self`` (attn1). The defaults probe cross attention
in blocks 8-12 (16x16 and 32x32) and self attention in the last three
blocks (64x64).
"""
import os

import torch
import torch.nn as nn

from ..errors import ClassCountError, ConfigurationError, InputShapeError
from .base import (RANDOM_PROMPT, AttentionProbeSet, Backbone, BackboneDescriptor, LatentImage, NoisySample,
                   PromptEmbeddings, image_to_tensor, parameter_digest)
from .scheduler import DDPMSchedule

WEIGHTS_ENV = "PARTSEG_WEIGHTS"
DEFAULT_CROSS = tuple(range(8, 13))
DEFAULT_SELF = (14, 15, 16)


def layer_ids(module_names, cross_blocks=DEFAULT_CROSS, self_blocks=DEFAULT_SELF):
    """Map attention-module names (in execution order) to probe ids.

    ``module_names`` are the UNet's ``...attn1`` / ``...attn2`` module paths;
    returns ({probe id: module name}, cross ids, self ids).
    """
    order = {"down_blocks": 0, "mid_block": 1, "up_blocks": 2}
    blocks = sorted({n.rsplit(".", 1)[0] for n in module_names if n.endswith((".attn1", ".attn2"))},
                    key=lambda n: (order[n.split(".")[0]], [int(p) for p in n.split(".") if p.isdigit()]))
    mapping = {}
    for i, block in enumerate(blocks, start=1):
        mapping[f"L{i:02d}.self"] = block + ".attn1"
        mapping[f"L{i:02d}.cross"] = block + ".attn2"
    for b in tuple(cross_blocks) + tuple(self_blocks):
        if not 1 <= b <= len(blocks):
            raise ConfigurationError(f"attention block {b} outside 1..{len(blocks)}")
    cross = tuple(f"L{b:02d}.cross" for b in cross_blocks)
    selfs = tuple(f"L{b:02d}.self" for b in self_blocks)
    return mapping, cross, selfs


class ProbeProcessor:
    """Attention processor computing softmax(QK^T/sqrt(d)) explicitly and recording it (head-averaged)."""

    def __init__(self, probe_id, store):
        self.probe_id = probe_id
        self.store = store

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kw):
        residual = hidden_states
        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)
        ndim = hidden_states.ndim
        if ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        batch, n, _ = hidden_states.shape
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)
        query = attn.to_q(hidden_states)
        context = hidden_states if encoder_hidden_states is None else encoder_hidden_states
        if encoder_hidden_states is not None and attn.norm_cross:
            context = attn.norm_encoder_hidden_states(context)
        key, value = attn.to_k(context), attn.to_v(context)
        query, key, value = (attn.head_to_batch_dim(x) for x in (query, key, value))
        probs = attn.get_attention_scores(query, key, attention_mask)
        if self.store is not None and self.store.active:
            heads = attn.heads
            side = int(round(n ** 0.5))
            p = probs.reshape(batch, heads, n, -1).mean(dim=1)[0]
            if encoder_hidden_states is None:
                p = p.reshape(side, side, side, side)
            else:
                p = p.reshape(side, side, -1)
            self.store.maps[self.probe_id] = p
        out = attn.batch_to_head_dim(torch.bmm(probs, value))
        out = attn.to_out[1](attn.to_out[0](out))
        if ndim == 4:
            out = out.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class _Store:
    def __init__(self):
        self.active = False
        self.maps = {}


class SD21Backbone(Backbone):
    name = "sd21"
    input_size = 512
    token_capacity = 77

    def __init__(self, weights=None, device="cpu", dtype=torch.float32, cross_blocks=DEFAULT_CROSS,
                 self_blocks=DEFAULT_SELF):
        try:
            from diffusers import AutoencoderKL, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as e:
            raise ConfigurationError(f"the sd21 backbone needs diffusers and transformers ({e})") from None
        weights = weights or os.environ.get(WEIGHTS_ENV)
        if not weights:
            raise ConfigurationError(f"sd21 needs a weights path (config backbone.weights or ${WEIGHTS_ENV})")
        self.device = torch.device(device)
        self._dtype = dtype
        self.tokenizer = CLIPTokenizer.from_pretrained(weights, subfolder="tokenizer")
        self.text_encoder = CLIPTextModel.from_pretrained(weights, subfolder="text_encoder")
        self.vae = AutoencoderKL.from_pretrained(weights, subfolder="vae")
        self.unet = UNet2DConditionModel.from_pretrained(weights, subfolder="unet")
        for m in (self.text_encoder, self.vae, self.unet):
            m.to(self.device, dtype).eval().requires_grad_(False)
        sched = self._read_scheduler(weights)
        self.schedule = DDPMSchedule(sched.get("num_train_timesteps", 1000), sched.get("beta_start", 0.00085),
                                     sched.get("beta_end", 0.012), sched.get("beta_schedule", "scaled_linear"))
        self.prediction_type = sched.get("prediction_type", "epsilon")
        self.vae_scale = self.vae.config.scaling_factor

        names = [n for n, _ in self.unet.named_modules()]
        self.layer_map, self.cross_ids, self.self_ids = layer_ids(names, cross_blocks, self_blocks)
        self._store = _Store()
        wanted = set(self.cross_ids + self.self_ids)
        procs = {}
        for pid, mod in self.layer_map.items():
            procs[mod + ".processor"] = ProbeProcessor(pid, self._store if pid in wanted else None)
        self.unet.set_attn_processor(procs)
        self._descriptor = None

    @staticmethod
    def _read_scheduler(weights):
        import json

        path = os.path.join(weights, "scheduler", "scheduler_config.json")
        if os.path.exists(path):
            with open(path) as f:
                return json.load(f)
        return {}

    @property
    def dtype(self):
        return self._dtype

    def parameter_digest(self):
        return parameter_digest(nn.ModuleDict({"unet": self.unet, "vae": self.vae, "text": self.text_encoder}))

    @property
    def descriptor(self):
        if self._descriptor is None:
            side = self.input_size // 8
            self._descriptor = BackboneDescriptor(
                name=self.name, cross_attention_layer_ids=self.cross_ids, self_attention_layer_ids=self.self_ids,
                latent_shape=(self.unet.config.in_channels, side, side), input_size=self.input_size,
                token_capacity=self.token_capacity, t_max=self.schedule.t_max,
                parameter_digest=self.parameter_digest(),
                extra={"prediction_type": self.prediction_type})
        return self._descriptor

    def encode_image(self, image):
        x = image_to_tensor(image, self._dtype)
        if x.shape[1:] != (self.input_size, self.input_size):
            raise InputShapeError(f"sd21 takes {self.input_size}x{self.input_size} images, got {tuple(x.shape[1:])}")
        with torch.no_grad():
            z = self.vae.encode((x[None] * 2 - 1).to(self.device)).latent_dist.mode() * self.vae_scale
        return LatentImage(z[0], scale=8.0)

    def add_noise(self, latent, t, noise=None, generator=None):
        t = self.schedule.check_timestep(t)
        if noise is None:
            noise = torch.randn(latent.shape, generator=generator, dtype=torch.float64).to(self._dtype)
        elif tuple(noise.shape) != latent.shape:
            raise InputShapeError(f"noise shape {tuple(noise.shape)} != latent shape {latent.shape}")
        noise = noise.to(latent.data.device)
        return NoisySample(LatentImage(self.schedule.add_noise(latent.data, noise, t), latent.scale), noise, t)

    def denoise_with_probes(self, sample, prompt):
        self._check_prompt(prompt)
        self._store.maps = {}
        self._store.active = True
        try:
            x = sample.noisy.data[None].to(self.device, self._dtype)
            ctx = prompt.embeddings[None].to(self.device, self._dtype)
            out = self.unet(x, sample.timestep, encoder_hidden_states=ctx).sample[0]
        finally:
            self._store.active = False
        if self.prediction_type == "v_prediction":
            out = self.schedule.v_to_epsilon(out, sample.noisy.data.to(out), sample.timestep)
        cross = {k: v for k, v in self._store.maps.items() if k.endswith(".cross")}
        selfs = {k: v for k, v in self._store.maps.items() if k.endswith(".self")}
        probes = AttentionProbeSet(cross, selfs, out)
        self._check_probes(probes)
        return probes

    def encode_prompt(self, prompt_text, num_classes, class_names=None, seed=0):
        if num_classes > self.token_capacity:
            raise ClassCountError(f"K={num_classes} exceeds token capacity {self.token_capacity}")
        names = self._class_names(class_names, num_classes)

        def encode(text):
            ids = self.tokenizer(text, padding="max_length", max_length=self.token_capacity, truncation=True,
                                 return_tensors="pt").input_ids.to(self.device)
            return self.text_encoder(ids)[0][0]

        with torch.no_grad():
            if prompt_text == RANDOM_PROMPT:
                scale = encode("").std()
                g = torch.Generator().manual_seed(seed)
                emb = torch.randn(self.token_capacity, self.text_encoder.config.hidden_size, generator=g,
                                  dtype=torch.float64).to(self.device) * scale.double()
            else:
                emb = encode(prompt_text)
        return PromptEmbeddings(emb.to(self._dtype).clone(), num_classes, names, prompt_text,
                                self.descriptor.digest)
