"""Variance-preserving noise schedule, forward diffusion and DDIM stepping.

All arrays are ``float64`` numpy arrays in ``H x W x C`` layout.  Timesteps are
integers in ``[0, T]`` where ``0`` is the clean image; ``alpha_bar[0] == 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SeedLike = int | np.random.Generator | np.random.SeedSequence | None


class ScheduleError(ValueError):
    """Raised for out-of-range or misordered timesteps."""


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gaussian(shape: tuple[int, ...], seed: SeedLike) -> np.ndarray:
    return as_rng(seed).standard_normal(shape)


@dataclass(frozen=True)
class LatentImage:
    data: np.ndarray
    t: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"expected H x W x C array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent contains non-finite entries")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "t", int(self.t))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def retag(self, t: int) -> "LatentImage":
        return LatentImage(self.data, t)


@dataclass(frozen=True)
class NormalizedTime:
    """Normalized position on the trajectory: 0 is timestep T, 1 is timestep 0."""

    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"normalized time must lie in [0, 1], got {self.value}")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "variance-preserving"
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be positive")
        if self.kind != "variance-preserving":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    # -- lookups -----------------------------------------------------------
    def check(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T}]")
        return t

    def ab(self, t: int) -> float:
        return float(self.alpha_bar[self.check(t)])

    def sigma(self, t: int) -> float:
        a = self.ab(t)
        return float(np.sqrt((1.0 - a) / a))

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt((1.0 - self.alpha_bar) / self.alpha_bar)

    def to_normalized(self, t: int) -> float:
        return (self.T - self.check(t)) / self.T

    def to_timestep(self, value: float | NormalizedTime) -> int:
        if isinstance(value, NormalizedTime):
            value = value.value
        NormalizedTime(float(value))
        return int(round((1.0 - float(value)) * self.T))

    def timesteps(self, steps: int) -> list[int]:
        """Descending sampling grid ``[T, ..., 0]`` with ``steps`` intervals."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        grid = np.round(np.linspace(self.T, 0, steps + 1)).astype(int)
        return [int(v) for v in grid]

    # -- processes -----------------------------------------------------------
    def forward_diffuse(self, x0: LatentImage, t: int, eps: np.ndarray | SeedLike = None) -> LatentImage:
        if x0.t != 0:
            raise ScheduleError(f"forward_diffuse expects a clean latent, got t={x0.t}")
        a = self.ab(t)
        eps = self._noise(eps, x0.shape)
        return LatentImage(np.sqrt(a) * x0.data + np.sqrt(1.0 - a) * eps, t)

    def estimate_clean(self, xt: LatentImage, eps_pred: np.ndarray, t: int | None = None) -> LatentImage:
        t = xt.t if t is None else self.check(t)
        if t == 0:
            return xt.retag(0)
        a = self.ab(t)
        eps_pred = np.asarray(eps_pred, dtype=np.float64)
        return LatentImage((xt.data - np.sqrt(1.0 - a) * eps_pred) / np.sqrt(a), 0)

    def ddim_step(
        self,
        xt: LatentImage,
        eps_pred: np.ndarray,
        t: int,
        t_prev: int,
        eta: float = 0.0,
        seed: SeedLike = None,
        clip_x0: float | None = None,
    ) -> LatentImage:
        """DDIM update ``t -> t_prev``.

        ``clip_x0`` clamps the clean estimate to ``[-clip_x0, clip_x0]`` and
        re-derives the noise direction from the clamped estimate.
        """
        t, t_prev = self.check(t), self.check(t_prev)
        if t_prev >= t:
            raise ScheduleError(f"t_prev ({t_prev}) must be smaller than t ({t})")
        if not 0.0 <= eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {eta}")
        eps_pred = np.asarray(eps_pred, dtype=np.float64)
        a_t, a_prev = self.ab(t), self.ab(t_prev)
        x0_hat = (xt.data - np.sqrt(1.0 - a_t) * eps_pred) / np.sqrt(a_t)
        if clip_x0 is not None:
            x0_hat = np.clip(x0_hat, -clip_x0, clip_x0)
            eps_pred = (xt.data - np.sqrt(a_t) * x0_hat) / np.sqrt(1.0 - a_t)
        var = eta**2 * (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)
        direction = np.sqrt(max(1.0 - a_prev - var, 0.0)) * eps_pred
        out = np.sqrt(a_prev) * x0_hat + direction
        if var > 0.0:
            out = out + np.sqrt(var) * gaussian(xt.shape, seed)
        return LatentImage(out, t_prev)

    def perturb_between(self, x_lo: LatentImage, t_lo: int, t_hi: int, seed: SeedLike = None) -> LatentImage:
        """Sample the VP perturbation kernel ``q(x_hi | x_lo)``."""
        t_lo, t_hi = self.check(t_lo), self.check(t_hi)
        if t_lo > t_hi:
            raise ScheduleError(f"perturb_between needs t_lo <= t_hi, got {t_lo} > {t_hi}")
        if t_lo == t_hi:
            return x_lo.retag(t_hi)
        ratio = self.ab(t_hi) / self.ab(t_lo)
        eps = gaussian(x_lo.shape, seed)
        return LatentImage(np.sqrt(ratio) * x_lo.data + np.sqrt(1.0 - ratio) * eps, t_hi)

    def nearest_timestep_for_sigma(self, sigma: float) -> int:
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        # argmin returns the first (smallest) index on ties
        return int(np.argmin(np.abs(self.sigmas - sigma)))

    def _noise(self, eps, shape) -> np.ndarray:
        if isinstance(eps, np.ndarray):
            if eps.shape != tuple(shape):
                raise ValueError(f"noise shape {eps.shape} does not match latent {shape}")
            return eps.astype(np.float64, copy=False)
        return gaussian(tuple(shape), eps)
