"""A small deterministic stand-in for a latent diffusion model.

Same interface and probe layout semantics as the real adapter, but tiny
enough to run hundreds of forward passes on a CPU: 64x64 RGB input,
8x16x16 latent, 77 text tokens of width 32, a two-level UNet with two
cross-attention layers at 8x8, one at 16x16 and three trailing
self-attention layers at 16x16. As in Stable Diffusion, the self-attention
maps used are at least as fine as the cross-attention ones and the start
token acts as an attention sink. Weights come from a fixed seed and are
never trained.
"""
import math
import zlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ClassCountError, InputShapeError
from .base import (RANDOM_PROMPT, AttentionProbeSet, Backbone, BackboneDescriptor, LatentImage,
                   NoisySample, PromptEmbeddings, image_to_tensor, parameter_digest)
from .scheduler import DDPMSchedule

CROSS_IDS = ("mid.0.cross", "mid.1.cross", "up.0.cross")
SELF_IDS = ("up.1.self", "up.2.self", "up.3.self")
SINK_STRENGTH = 2.0
SELF_TEMPERATURE = 40.0
# text-key sensitivity; the sink logit scales with it too, hence the small SINK_STRENGTH
KEY_GAIN = 4.0


def timestep_embedding(t, dim, dtype):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = float(t) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)]).to(dtype)


class ToyAttention(nn.Module):
    """Single-sample multi-head attention that also returns its probabilities.

    Self-attention layers use a tied, cosine-normalized query/key so that
    locations with similar features attend to each other; that is the
    property the WAS map relies on in real diffusion UNets.
    """

    def __init__(self, channels, context_dim=None, heads=2, cosine_temperature=None):
        super().__init__()
        self.heads = heads
        self.head_dim = channels // heads
        self.norm = nn.GroupNorm(4, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        kv_dim = context_dim or channels
        self.to_k = None if cosine_temperature else nn.Linear(kv_dim, channels, bias=False)
        self.to_v = nn.Linear(kv_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.cosine_temperature = cosine_temperature
        # shared query offset; the backbone points it at the start token's key (attention sink)
        self.register_buffer("query_bias", torch.zeros(channels))

    def forward(self, x, context=None):
        c, h, w = x.shape
        hidden = self.norm(x[None])[0].reshape(c, h * w).T  # (HW, C)
        ctx = hidden if context is None else context
        q = self.to_q(hidden).reshape(h * w, self.heads, self.head_dim).transpose(0, 1)
        if self.cosine_temperature:
            k = self.to_q(ctx).reshape(-1, self.heads, self.head_dim).transpose(0, 1)
            q, k = F.normalize(q, dim=-1), F.normalize(k, dim=-1)
            logits = self.cosine_temperature * q @ k.transpose(1, 2)
        else:
            q = q + self.query_bias.reshape(self.heads, 1, self.head_dim)
            k = self.to_k(ctx).reshape(-1, self.heads, self.head_dim).transpose(0, 1)
            logits = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)
        probs = logits.softmax(dim=-1)  # (heads, HW, N)
        v = self.to_v(ctx).reshape(-1, self.heads, self.head_dim).transpose(0, 1)
        out = (probs @ v).transpose(0, 1).reshape(h * w, c)
        out = self.to_out(out).T.reshape(c, h, w)
        return x + out, probs


class ToyUNet(nn.Module):
    def __init__(self, latent_channels=8, channels=32, context_dim=32, heads=2, self_temperature=SELF_TEMPERATURE):
        super().__init__()
        self.channels = channels
        self.time_mlp = nn.Sequential(nn.Linear(channels, channels), nn.SiLU(), nn.Linear(channels, channels))
        self.conv_in = nn.Conv2d(latent_channels, channels, 3, padding=1)
        self.res_a = nn.Conv2d(channels, channels, 3, padding=1)
        self.down = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.res_mid = nn.Conv2d(channels, channels, 3, padding=1)
        self.up_merge = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.cross = nn.ModuleDict({
            i.replace(".", "_"): ToyAttention(channels, context_dim, heads) for i in CROSS_IDS})
        self.selfattn = nn.ModuleDict({
            i.replace(".", "_"): ToyAttention(channels, heads=heads, cosine_temperature=self_temperature)
            for i in SELF_IDS})
        self.norm_out = nn.GroupNorm(4, channels)
        self.conv_out = nn.Conv2d(channels, latent_channels, 3, padding=1)

    def forward(self, latent, t, context):
        cross, selfs = {}, {}

        def run_cross(name, x):
            x, p = self.cross[name.replace(".", "_")](x, context)
            cross[name] = p.reshape(p.shape[0], x.shape[1], x.shape[2], -1)
            return x

        def run_self(name, x):
            x, p = self.selfattn[name.replace(".", "_")](x)
            selfs[name] = p.reshape(p.shape[0], x.shape[1], x.shape[2], x.shape[1], x.shape[2])
            return x

        temb = self.time_mlp(timestep_embedding(t, self.channels, latent.dtype))
        x = self.conv_in(latent[None])[0] + temb[:, None, None]
        x = x + F.silu(self.res_a(F.silu(x[None])))[0]
        skip = x
        x = self.down(x[None])[0]
        x = x + F.silu(self.res_mid(F.silu(x[None])))[0]
        for name in CROSS_IDS:
            if name.startswith("mid"):
                x = run_cross(name, x)
        x = F.interpolate(x[None], scale_factor=2, mode="nearest")[0]
        x = self.up_merge(torch.cat([x, skip])[None])[0]
        for name in CROSS_IDS:
            if name.startswith("up"):
                x = run_cross(name, x)
        for name in SELF_IDS:
            x = run_self(name, x)
        eps = self.conv_out(F.silu(self.norm_out(x[None])))[0]
        return eps, cross, selfs


class ToyTextEncoder(nn.Module):
    """Hash-tokenized word embeddings plus positions, layer-normalized."""

    BOS, EOS = 1, 2

    def __init__(self, vocab=512, capacity=77, dim=32):
        super().__init__()
        self.vocab = vocab
        self.capacity = capacity
        self.token = nn.Embedding(vocab, dim)
        self.position = nn.Embedding(capacity, dim)
        self.norm = nn.LayerNorm(dim)

    def tokenize(self, text):
        words = text.lower().split()
        ids = [self.BOS] + [3 + zlib.crc32(w.encode()) % (self.vocab - 3) for w in words]
        ids = ids[: self.capacity - 1] + [self.EOS]
        return ids + [self.EOS] * (self.capacity - len(ids))

    def forward(self, text):
        ids = torch.tensor(self.tokenize(text))
        return self.norm(self.token(ids) + self.position(torch.arange(self.capacity)))


class ToyBackbone(Backbone):
    name = "toy"
    input_size = 64
    patch = 4

    latent_gain = 6.0

    def __init__(self, seed=0, dtype=torch.float32, latent_channels=8, token_capacity=77, text_dim=32,
                 num_train_timesteps=1000, sink_strength=SINK_STRENGTH, self_temperature=SELF_TEMPERATURE,
                 key_gain=KEY_GAIN):
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.unet = ToyUNet(latent_channels, channels=32, context_dim=text_dim,
                                self_temperature=self_temperature)
            self.text_encoder = ToyTextEncoder(capacity=token_capacity, dim=text_dim)
            self.image_proj = nn.Linear(3 * self.patch * self.patch, latent_channels, bias=False)
        finally:
            torch.random.set_rng_state(gen_state)
        with torch.no_grad():
            start = self.text_encoder("")[0]
            for attn in self.unet.cross.values():
                attn.to_k.weight.mul_(key_gain)
                k = attn.to_k(start).reshape(attn.heads, attn.head_dim)
                attn.query_bias.copy_((sink_strength * F.normalize(k, dim=-1)).reshape(-1))
        self._dtype = dtype
        self.seed = seed
        for m in (self.unet, self.text_encoder, self.image_proj):
            m.to(dtype).eval().requires_grad_(False)
        self.schedule = DDPMSchedule(num_train_timesteps, 1e-4, 2e-2, "linear")
        self.latent_channels = latent_channels
        self.token_capacity = token_capacity
        self.text_dim = text_dim
        self._descriptor = None

    @property
    def dtype(self):
        return self._dtype

    def parameter_digest(self):
        modules = nn.ModuleDict({"unet": self.unet, "text": self.text_encoder, "image": self.image_proj})
        return parameter_digest(modules)

    @property
    def descriptor(self):
        if self._descriptor is None:
            side = self.input_size // self.patch
            self._descriptor = BackboneDescriptor(
                name=self.name,
                cross_attention_layer_ids=CROSS_IDS,
                self_attention_layer_ids=SELF_IDS,
                latent_shape=(self.latent_channels, side, side),
                input_size=self.input_size,
                token_capacity=self.token_capacity,
                t_max=self.schedule.t_max,
                parameter_digest=self.parameter_digest(),
                extra={"seed": str(self.seed), "dtype": str(self._dtype).replace("torch.", "")},
            )
        return self._descriptor

    def encode_image(self, image):
        x = image_to_tensor(image, self._dtype)
        if x.shape[1:] != (self.input_size, self.input_size):
            raise InputShapeError(
                f"toy backbone takes {self.input_size}x{self.input_size} images, got {tuple(x.shape[1:])}")
        p = self.patch
        side = self.input_size // p
        patches = x.reshape(3, side, p, side, p).permute(1, 3, 0, 2, 4).reshape(side, side, -1)
        with torch.no_grad():
            z = self.image_proj(patches - 0.5) * self.latent_gain
        return LatentImage(z.permute(2, 0, 1).contiguous(), scale=float(p))

    def add_noise(self, latent, t, noise=None, generator=None):
        t = self.schedule.check_timestep(t)
        if noise is None:
            noise = torch.randn(latent.shape, generator=generator, dtype=torch.float64).to(self._dtype)
        elif tuple(noise.shape) != latent.shape:
            raise InputShapeError(f"noise shape {tuple(noise.shape)} != latent shape {latent.shape}")
        noisy = self.schedule.add_noise(latent.data, noise, t)
        return NoisySample(LatentImage(noisy, latent.scale), noise, t)

    def denoise_with_probes(self, sample, prompt):
        self._check_prompt(prompt)
        eps, cross, selfs = self.unet(sample.noisy.data, sample.timestep, prompt.embeddings.to(self._dtype))
        probes = AttentionProbeSet(cross=cross, self_=selfs, predicted_noise=eps)
        self._check_probes(probes)
        return probes

    def encode_prompt(self, prompt_text, num_classes, class_names=None, seed=0):
        if num_classes > self.token_capacity:
            raise ClassCountError(f"K={num_classes} exceeds token capacity {self.token_capacity}")
        names = self._class_names(class_names, num_classes)
        with torch.no_grad():
            if prompt_text == RANDOM_PROMPT:
                scale = self.text_encoder("").std()
                g = torch.Generator().manual_seed(seed)
                emb = torch.randn(self.token_capacity, self.text_dim, generator=g, dtype=torch.float64)
                emb = (emb * scale.double()).to(self._dtype)
            else:
                emb = self.text_encoder(prompt_text)
        return PromptEmbeddings(emb.clone(), num_classes, names, prompt_text, self.descriptor.digest)
