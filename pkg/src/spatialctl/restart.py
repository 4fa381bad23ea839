"""Mid-trajectory restart cycles and windowed self-recurrence."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .scheduler import LatentImage, NoiseSchedule, NormalizedTime, SeedLike


class Stepper(Protocol):
    def __call__(self, x: LatentImage, t: int, t_prev: int, seed: SeedLike) -> LatentImage: ...


class RestartConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RestartConfig:
    sigma_tmin: float = 1.0
    sigma_tmax: float = 2.0
    N: int = 3
    S_steps: int = 5
    N_prime: int = 2
    tprime_min: float = 0.1
    tprime_max: float = 0.5

    def __post_init__(self):
        if not 0 <= self.sigma_tmin < self.sigma_tmax:
            raise RestartConfigError(f"need 0 <= sigma_tmin < sigma_tmax, got {self.sigma_tmin}, {self.sigma_tmax}")
        if self.N < 0 or self.S_steps < 1 or self.N_prime < 1:
            raise RestartConfigError("N must be >= 0, S_steps and N_prime must be >= 1")
        NormalizedTime(self.tprime_min)
        NormalizedTime(self.tprime_max)
        if self.tprime_min >= self.tprime_max:
            raise RestartConfigError("tprime_min must be smaller than tprime_max")

    def bounds(self, schedule: NoiseSchedule) -> tuple[int, int]:
        t_min = schedule.nearest_timestep_for_sigma(self.sigma_tmin)
        t_max = schedule.nearest_timestep_for_sigma(self.sigma_tmax)
        if t_min >= t_max:
            raise RestartConfigError(f"mapped t_min={t_min} is not below t_max={t_max}")
        return t_min, t_max

    def recurs_at(self, t: int, schedule: NoiseSchedule) -> bool:
        return self.N_prime > 1 and self.tprime_min <= schedule.to_normalized(t) <= self.tprime_max


def cycle_grid(t_max: int, t_min: int, steps: int) -> list[int]:
    grid = [int(v) for v in np.round(np.linspace(t_max, t_min, steps + 1))]
    if len(set(grid)) != len(grid):
        raise RestartConfigError(f"{steps} steps do not fit between t={t_max} and t={t_min}")
    return grid


def _seeds(seed: SeedLike, n: int) -> list[np.random.SeedSequence]:
    if isinstance(seed, np.random.SeedSequence):
        return seed.spawn(n)
    if isinstance(seed, np.random.Generator):
        return [np.random.SeedSequence(int(s)) for s in seed.integers(0, 2**63, size=n)]
    return np.random.SeedSequence(seed).spawn(n)


def restart_refine(
    x_tmin: LatentImage,
    stepper: Stepper,
    cfg: RestartConfig,
    schedule: NoiseSchedule | None = None,
    seed: SeedLike = 0,
    *,
    t_min: int | None = None,
    trace: list | None = None,
) -> LatentImage:
    """Run ``cfg.N`` perturb-then-denoise cycles between ``t_min`` and ``t_max``.

    ``t_min`` defaults to the sigma-mapped timestep; callers snapping restart
    onto their sampling grid pass it explicitly.  ``trace`` (if given) receives
    ``("perturb", lo, hi)`` and ``("step", t, t_prev)`` events.
    """
    schedule = schedule or NoiseSchedule()
    if cfg.N == 0:
        return x_tmin
    mapped_min, t_max = cfg.bounds(schedule)
    t_min = mapped_min if t_min is None else int(t_min)
    if t_min >= t_max:
        raise RestartConfigError(f"t_min={t_min} is not below t_max={t_max}")
    if x_tmin.t != t_min:
        raise ValueError(f"latent is tagged t={x_tmin.t}, restart expects t_min={t_min}")
    grid = cycle_grid(t_max, t_min, cfg.S_steps)
    x = x_tmin
    for cycle_seed in _seeds(seed, cfg.N):
        noise_seed, *step_seeds = cycle_seed.spawn(cfg.S_steps + 1)
        x = schedule.perturb_between(x, t_min, t_max, np.random.default_rng(noise_seed))
        if trace is not None:
            trace.append(("perturb", t_min, t_max))
        for (t, t_prev), s in zip(zip(grid[:-1], grid[1:]), step_seeds):
            x = stepper(x, t, t_prev, np.random.default_rng(s))
            if trace is not None:
                trace.append(("step", t, t_prev))
    return x


def self_recur_step(
    x: LatentImage,
    t: int,
    t_prev: int,
    stepper: Stepper,
    cfg: RestartConfig,
    schedule: NoiseSchedule | None = None,
    seed: SeedLike = 0,
) -> LatentImage:
    """Step ``t -> t_prev``; inside the window, re-noise back to ``t`` and redo it."""
    schedule = schedule or NoiseSchedule()
    if not cfg.recurs_at(t, schedule):
        return stepper(x, t, t_prev, seed)
    seeds = _seeds(seed, 2 * cfg.N_prime - 1)
    out = stepper(x, t, t_prev, np.random.default_rng(seeds[0]))
    for i in range(1, cfg.N_prime):
        back = schedule.perturb_between(out, t_prev, t, np.random.default_rng(seeds[2 * i - 1]))
        out = stepper(back, t, t_prev, np.random.default_rng(seeds[2 * i]))
    return out


def plain_stepper(denoise: Callable[[LatentImage, int], np.ndarray], schedule: NoiseSchedule, eta: float = 0.0,
                  clip_x0: float | None = None) -> Stepper:
    """Adapt an ``eps = denoise(x, t)`` callable into a DDIM :class:`Stepper`."""

    def step(x: LatentImage, t: int, t_prev: int, seed: SeedLike) -> LatentImage:
        return schedule.ddim_step(x, denoise(x, t), t, t_prev, eta=eta, seed=seed, clip_x0=clip_x0)

    return step
