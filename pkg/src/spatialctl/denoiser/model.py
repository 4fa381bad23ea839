"""Three-resolution encoder-decoder with self-attention at every decoder level.

Decoder layers are the injection points: ``dec0`` (lowest resolution) to
``dec2`` (full resolution).  Each exposes the output of its first conv block
(pre-attention feature) and its post-softmax self-attention map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

LAYERS = ("dec0", "dec1", "dec2")


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, int, int] = (32, 64, 128)
    in_channels: int = 3
    prompt_dim: int = 128
    emb_dim: int = 128
    groups: int = 8

    def to_dict(self) -> dict[str, Any]:
        return {
            "channels": list(self.channels),
            "in_channels": self.in_channels,
            "prompt_dim": self.prompt_dim,
            "emb_dim": self.emb_dim,
            "groups": self.groups,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class ForwardContext:
    """Per-call tap requests and overrides, threaded through ``forward``.

    Overrides are batched tensors: features ``B x HW x c``, attentions
    ``B x HW x HW``.  ``appearance`` maps a layer to a callable
    ``(f, w_q, w_k) -> f`` applied after feature replacement.
    """

    taps: frozenset[str] = frozenset()
    features: dict[str, torch.Tensor] = field(default_factory=dict)
    attentions: dict[str, torch.Tensor] = field(default_factory=dict)
    appearance: dict[str, Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]] = field(
        default_factory=dict
    )
    captured_features: dict[str, torch.Tensor] = field(default_factory=dict)
    captured_attentions: dict[str, torch.Tensor] = field(default_factory=dict)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    def __init__(self, c: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, c), c)
        self.q = nn.Linear(c, c, bias=False)
        self.k = nn.Linear(c, c, bias=False)
        self.v = nn.Linear(c, c, bias=False)
        self.out = nn.Linear(c, c)
        self.dim = c

    def normed(self, f: torch.Tensor) -> torch.Tensor:
        return self.norm(f.transpose(1, 2)).transpose(1, 2)

    def attention(self, f: torch.Tensor) -> torch.Tensor:
        h = self.normed(f)
        logits = self.q(h) @ self.k(h).transpose(1, 2) / math.sqrt(self.dim)
        return torch.softmax(logits, dim=-1)

    def fused(self, f: torch.Tensor) -> torch.Tensor:
        # training path: no taps, so the map never needs to leave this call
        h = self.normed(f)
        q = self.q(h) * (1.0 / math.sqrt(self.dim))
        attn = torch.softmax(q @ self.k(h).transpose(1, 2), dim=-1)
        return f + self.out(attn @ self.v(h))

    def apply(self, f: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
        return f + self.out(attn @ self.v(self.normed(f)))


class DecoderLayer(nn.Module):
    def __init__(self, name: str, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.name = name
        self.block = ResBlock(cin, cout, emb_dim, groups)
        self.attn = SelfAttention(cout, groups)

    def forward(self, x: torch.Tensor, emb: torch.Tensor, ctx: ForwardContext) -> torch.Tensor:
        h = self.block(x, emb)
        b, c, hh, ww = h.shape
        f = h.flatten(2).transpose(1, 2)
        name = self.name
        if name in ctx.features:
            f = _check_override(ctx.features[name], f.shape, name, "feature").to(f.dtype)
        if name in ctx.appearance:
            f = ctx.appearance[name](f, self.attn.q.weight.T, self.attn.k.weight.T)
        if self.training and not (ctx.taps or ctx.attentions):
            out = self.attn.fused(f)
            return out.transpose(1, 2).reshape(b, c, hh, ww)
        attn = self.attn.attention(f)
        if name in ctx.attentions:
            attn = _check_override(ctx.attentions[name], attn.shape, name, "attention").to(attn.dtype)
        if name in ctx.taps:
            ctx.captured_features[name] = f
            ctx.captured_attentions[name] = attn
        out = self.attn.apply(f, attn)
        return out.transpose(1, 2).reshape(b, c, hh, ww)


def _check_override(value: torch.Tensor, shape: torch.Size, layer: str, what: str) -> torch.Tensor:
    if tuple(value.shape) != tuple(shape):
        raise ValueError(
            f"{what} override for layer {layer!r} has shape {tuple(value.shape)}, expected {tuple(shape)}"
        )
    return value


class UNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        c0, c1, c2 = config.channels
        e, g = config.emb_dim, config.groups
        self.time_mlp = nn.Sequential(nn.Linear(64, e), nn.SiLU(), nn.Linear(e, e))
        self.prompt_proj = nn.Linear(config.prompt_dim, e)
        self.stem = nn.Conv2d(config.in_channels, c0, 3, padding=1)
        self.enc0 = ResBlock(c0, c0, e, g)
        self.down0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c0, c1, e, g)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c1, c2, e, g)
        self.mid = ResBlock(c2, c2, e, g)
        self.dec0 = DecoderLayer("dec0", c2 + c2, c2, e, g)
        self.up0 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec1 = DecoderLayer("dec1", c1 + c1, c1, e, g)
        self.up1 = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec2 = DecoderLayer("dec2", c0 + c0, c0, e, g)
        self.out_norm = nn.GroupNorm(min(g, c0), c0)
        self.out = nn.Conv2d(c0, config.in_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def layer_channels(self) -> dict[str, int]:
        c0, c1, c2 = self.config.channels
        return {"dec0": c2, "dec1": c1, "dec2": c0}

    def decoder(self, name: str) -> DecoderLayer:
        if name not in LAYERS:
            raise KeyError(f"unknown layer {name!r}; expected one of {LAYERS}")
        return getattr(self, name)

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        prompt: torch.Tensor,
        ctx: ForwardContext | None = None,
    ) -> torch.Tensor:
        ctx = ctx or ForwardContext()
        emb = self.time_mlp(timestep_embedding(t, 64)) + self.prompt_proj(prompt)
        h0 = self.enc0(self.stem(x), emb)
        h1 = self.enc1(self.down0(h0), emb)
        h2 = self.enc2(self.down1(h1), emb)
        h = self.mid(h2, emb)
        h = self.dec0(torch.cat([h, h2], dim=1), emb, ctx)
        h = self.up0(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        h = self.dec1(torch.cat([h, h1], dim=1), emb, ctx)
        h = self.up1(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        h = self.dec2(torch.cat([h, h0], dim=1), emb, ctx)
        return self.out(F.silu(self.out_norm(h)))
