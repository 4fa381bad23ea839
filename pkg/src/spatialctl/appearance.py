"""Spatially-aware appearance transfer through cross-image attention statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

ArrayLike = np.ndarray | torch.Tensor


@dataclass(frozen=True)
class AppearanceConfig:
    layers: tuple[str, ...] = ("dec0", "dec1")
    window: tuple[float, float] = (0.0, 1.0)
    epsilon_var: float = 1e-6

    def __post_init__(self):
        lo, hi = self.window
        if not (0.0 <= lo <= 1.0 and 0.0 <= hi <= 1.0):
            raise ValueError(f"appearance window must lie within [0, 1], got {self.window}")

    def active(self, normalized_t: float) -> bool:
        lo, hi = self.window
        return bool(self.layers) and lo <= hi and lo <= normalized_t <= hi


def spatial_norm(f: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Remove per-channel mean / std over the spatial axis (population statistics)."""
    mean = f.mean(dim=-2, keepdim=True)
    var = f.var(dim=-2, keepdim=True, unbiased=False)
    return (f - mean) / torch.sqrt(var + eps)


def cross_attention(f_out, f_app, w_q, w_k, d: int | None = None, eps: float = 1e-6) -> torch.Tensor:
    d = d or w_q.shape[-1]
    q = spatial_norm(f_out, eps) @ w_q
    k = spatial_norm(f_app, eps) @ w_k
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)


def weighted_stats(attn: torch.Tensor, f_app: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mean = attn @ f_app
    second = attn @ (f_app * f_app)
    # negatives appear from rounding when the weighted variance is ~0
    std = torch.sqrt(torch.clamp(second - mean * mean, min=0.0))
    return mean, std


def transfer(
    f_out: ArrayLike,
    f_app: ArrayLike,
    w_q: ArrayLike,
    w_k: ArrayLike,
    d: int | None = None,
    *,
    eps: float = 1e-6,
    attention: ArrayLike | None = None,
    layer: str | None = None,
) -> ArrayLike:
    """Modulate ``f_out`` (``[B x] HW x c``) with statistics of ``f_app``.

    ``attention`` forces the cross-image map instead of computing it.  Numpy
    inputs are evaluated in float64 and returned as numpy.
    """
    as_numpy = isinstance(f_out, np.ndarray)
    if as_numpy:
        f_out, f_app, w_q, w_k = (torch.from_numpy(np.asarray(a, dtype=np.float64)) for a in (f_out, f_app, w_q, w_k))
        if attention is not None:
            attention = torch.from_numpy(np.asarray(attention, dtype=np.float64))
    if f_out.shape[-1] != f_app.shape[-1]:
        raise ValueError(f"channel mismatch: f_out has {f_out.shape[-1]}, f_app has {f_app.shape[-1]}")
    if d is not None and d <= 0:
        raise ValueError("attention dimensionality d must be positive")
    attn = cross_attention(f_out, f_app, w_q, w_k, d, eps) if attention is None else attention.to(f_out.dtype)
    mean, std = weighted_stats(attn, f_app.to(f_out.dtype))
    out = std * spatial_norm(f_out, eps) + mean
    if not torch.isfinite(out).all():
        where = f" at layer {layer!r}" if layer else ""
        raise FloatingPointError(f"appearance transfer produced non-finite values{where}")
    return out.numpy() if as_numpy else out


def appearance_branch_step(x_app, t: int, t_prev: int, prompt_app: str, denoiser, cfg: AppearanceConfig,
                           schedule, *, eta: float = 1.0, seed=None, clip_x0: float | None = None):
    """Advance the appearance image one step; returns ``(x_prev, f_app or None)``.

    ``f_app`` is only exposed while ``t`` lies inside the configured window.
    """
    active = cfg.active(schedule.to_normalized(t))
    out = denoiser.denoise(x_app, t, prompt_app, cfg.layers if active else ())
    x_prev = schedule.ddim_step(x_app, out.eps_pred, t, t_prev, eta=eta, seed=seed, clip_x0=clip_x0)
    return x_prev, (dict(out.features) if active else None)
