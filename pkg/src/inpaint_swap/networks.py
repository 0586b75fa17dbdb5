"""Conditional-inpainting denoiser and the image <-> latent codecs."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteOutputError(FloatingPointError):
    pass


class RangeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# codecs


class Codec(nn.Module):
    latent_channels: int
    factor: int  # spatial downsampling factor

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError


def _check_range(x: torch.Tensor, tol: float = 1e-4) -> None:
    lo, hi = float(x.min()), float(x.max())
    if lo < -tol or hi > 1.0 + tol:
        raise RangeError(f"codec input must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")


class PixelCodec(Codec):
    """Pixel-space diffusion: the latent is the image rescaled from [0, 1] to [-1, 1]."""

    def __init__(self, channels: int = 3):
        super().__init__()
        self.latent_channels = channels
        self.factor = 1

    def encode(self, x):
        _check_range(x)
        return 2.0 * x - 1.0

    def decode(self, z):
        return 0.5 * (z + 1.0)

    def config(self):
        return {"kind": "pixel", "channels": self.latent_channels}


class ConvAutoencoderCodec(Codec):
    """Small convolutional autoencoder, 3 x H x W <-> latent_channels x H/4 x W/4."""

    def __init__(self, latent_channels: int = 4, width: int = 64):
        super().__init__()
        self.latent_channels = latent_channels
        self.factor = 4
        self.width = width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def encode(self, x):
        _check_range(x)
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def config(self):
        return {"kind": "autoencoder", "latent_channels": self.latent_channels, "width": self.width}


def codec_from_config(cfg: dict) -> Codec:
    kind = cfg.get("kind", "pixel")
    if kind == "pixel":
        return PixelCodec(cfg.get("channels", 3))
    if kind == "autoencoder":
        return ConvAutoencoderCodec(cfg["latent_channels"], cfg.get("width", 64))
    raise ValueError(f"unknown codec kind {kind!r}")


def train_codec(
    codec: ConvAutoencoderCodec,
    images: torch.Tensor,
    steps: int = 2000,
    batch_size: int = 32,
    lr: float = 2e-3,
    seed: int = 0,
) -> list[float]:
    """Fit the autoencoder with an L1 reconstruction loss. Returns the loss curve."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    losses = []
    codec.train()
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
        x = images[idx]
        loss = (codec.decode(codec.encode(x)) - x).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
    codec.eval()
    return losses


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 3
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    context_dim: int = 768
    groups: int = 8
    heads: int = 1

    @property
    def in_channels(self) -> int:
        # [z_t | z_inp | mask]
        return 2 * self.latent_channels + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Spatial queries attend over a context sequence of shape (B, L, D).

    The condition is supplied as a one-token sequence and serves as both key
    and value.
    """

    def __init__(self, channels: int, context_dim: int, groups: int, heads: int = 1):
        super().__init__()
        assert channels % heads == 0
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, context):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))  # (B, HW, C)
        k = self.to_k(context)  # (B, L, C)
        v = self.to_v(context)
        d = c // self.heads
        q = q.view(b, h * w, self.heads, d).transpose(1, 2)
        k = k.view(b, -1, self.heads, d).transpose(1, 2)
        v = v.view(b, -1, self.heads, d).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.to_out(out).transpose(1, 2).view(b, c, h, w)


class Denoiser(nn.Module):
    """U-Net ε-predictor on [z_t | z_inp | mask] with one cross-attention site per resolution."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        ch = [cfg.base_channels * m for m in cfg.channel_mult]
        tdim = cfg.base_channels * 4
        g = cfg.groups
        self.time_mlp = nn.Sequential(nn.Linear(cfg.base_channels, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        cin = ch[0]
        for i, c in enumerate(ch):
            self.down_res.append(ResBlock(cin, c, tdim, g))
            self.down_attn.append(CrossAttention(c, cfg.context_dim, g, cfg.heads))
            cin = c
            if i < len(ch) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))

        self.mid_res1 = ResBlock(cin, cin, tdim, g)
        self.mid_attn = CrossAttention(cin, cfg.context_dim, g, cfg.heads)
        self.mid_res2 = ResBlock(cin, cin, tdim, g)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, c in reversed(list(enumerate(ch))):
            self.up_res.append(ResBlock(cin + c, c, tdim, g))
            self.up_attn.append(CrossAttention(c, cfg.context_dim, g, cfg.heads))
            cin = c
            if i > 0:
                self.upsample.append(nn.Conv2d(c, ch[i - 1], 3, padding=1))
                cin = ch[i - 1]
        self.norm_out = nn.GroupNorm(g, cin)
        self.conv_out = nn.Conv2d(cin, cfg.latent_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t, context: torch.Tensor) -> torch.Tensor:
        """x: (B, 2c+1, h, w); t: int or (B,) timesteps; context: (B, D) or (B, L, D)."""
        b = x.shape[0]
        t = torch.as_tensor(t, device=x.device)
        if t.ndim == 0:
            t = t.expand(b)
        if context.ndim == 2:
            context = context[:, None, :]
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(x.dtype))

        h = self.conv_in(x)
        skips = []
        for i, (res, attn) in enumerate(zip(self.down_res, self.down_attn)):
            h = attn(res(h, temb), context)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid_res2(self.mid_attn(self.mid_res1(h, temb), context), temb)
        for j, (res, attn) in enumerate(zip(self.up_res, self.up_attn)):
            h = attn(res(torch.cat([h, skips.pop()], dim=1), temb), context)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


@dataclass
class DenoiserInput:
    """Channel-stacked [z_t | z_inp | mask] plus timestep and condition."""

    x: torch.Tensor
    t: object
    f: torch.Tensor

    @property
    def z_t(self) -> torch.Tensor:
        c = (self.x.shape[1] - 1) // 2
        return self.x[:, :c]


def resample_mask(mask, size: tuple[int, int]) -> torch.Tensor:
    """Area-average a (B, H, W) or (B, 1, H, W) mask down to ``size``."""
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    if m.ndim == 2:
        m = m[None]
    if m.ndim == 3:
        m = m[:, None]
    m = m.to(torch.get_default_dtype()) if not m.is_floating_point() else m
    if tuple(m.shape[-2:]) == tuple(size):
        return m
    return F.adaptive_avg_pool2d(m, size)


def assemble_input(z_t: torch.Tensor, z_inp: torch.Tensor, mask, t, f: torch.Tensor) -> DenoiserInput:
    """Stack the noisy latent, inpaint context and latent-resolution mask channel-wise."""
    if z_t.shape != z_inp.shape:
        raise ValueError(f"shape mismatch: z_t {tuple(z_t.shape)} vs z_inp {tuple(z_inp.shape)}")
    if z_t.ndim != 4:
        raise ValueError("expected batched (B, C, h, w) latents")
    m = resample_mask(mask, tuple(z_t.shape[-2:])).to(z_t.dtype)
    if m.shape[0] != z_t.shape[0]:
        raise ValueError(f"mask batch {m.shape[0]} != latent batch {z_t.shape[0]}")
    return DenoiserInput(torch.cat([z_t, z_inp, m], dim=1), t, f)


def predict_noise(model: Denoiser, inp: DenoiserInput) -> torch.Tensor:
    eps = model(inp.x, inp.t, inp.f)
    if not torch.isfinite(eps).all():
        raise NonFiniteOutputError("denoiser produced non-finite output")
    return eps
