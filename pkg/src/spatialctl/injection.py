"""Structure-rich feature injection with a decoupled structure timestep.

The structure branch forward-diffuses the condition image to ``g(t)`` and runs
the denoiser once per distinct effective timestep; its features and attention
maps replace the output branch's own on the selected decoder layers while the
output trajectory is inside the control window.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .denoiser import Denoiser, InjectionOverrides, TapBundle
from .denoiser.model import LAYERS
from .scheduler import LatentImage, NoiseSchedule, NormalizedTime, SeedLike

SCHEDULES = ("constant", "synchronous")


@dataclass(frozen=True)
class InjectionConfig:
    tau: float = 0.6
    schedule: str = "constant"
    C: float = 0.4
    layers: tuple[str, ...] = ("dec0", "dec1")
    inject_features: bool = True
    inject_attention: bool = True
    condition_latent_source: str = "forward_diffuse"
    seed: int = 0
    structure_prompt: str | None = None

    def __post_init__(self):
        NormalizedTime(self.tau)
        NormalizedTime(self.C)
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown injection schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.condition_latent_source != "forward_diffuse":
            raise ValueError("only forward_diffuse latent acquisition is supported")
        unknown = set(self.layers) - set(LAYERS)
        if unknown:
            raise ValueError(f"unknown injection layer(s) {sorted(unknown)}")
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def enabled(self) -> bool:
        return bool(self.layers) and (self.inject_features or self.inject_attention)

    def in_window(self, t: int, schedule: NoiseSchedule) -> bool:
        # inverted convention: normalized 0 is the noisiest step
        return schedule.to_normalized(t) <= self.tau + 1e-12

    def effective_timestep(self, t: int, schedule: NoiseSchedule) -> int:
        if self.schedule == "constant":
            return schedule.to_timestep(self.C)
        return schedule.check(t)


@dataclass
class StructureCache:
    """Structure-branch taps keyed by effective timestep.

    One run owns one cache; ``misses`` equals the number of structure-branch
    denoiser invocations.
    """

    entries: dict[tuple[int, tuple[str, ...]], TapBundle] = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def get(self, key):
        bundle = self.entries.get(key)
        if bundle is None:
            return None
        self.hits += 1
        return bundle

    def put(self, key, bundle: TapBundle) -> None:
        self.misses += 1
        self.entries[key] = bundle

    def counters(self) -> dict[str, int]:
        return {"hits": self.hits, "misses": self.misses}


def structure_latent(cond: LatentImage, t_effective: int, cfg: InjectionConfig, schedule: NoiseSchedule) -> LatentImage:
    # one noise draw per run keeps every cached entry on the same sample path
    eps = np.random.default_rng(cfg.seed).standard_normal(cond.shape)
    return schedule.forward_diffuse(cond, t_effective, eps)


def structure_taps(
    cond: LatentImage,
    t_effective: int,
    prompt: str,
    cfg: InjectionConfig,
    cache: StructureCache,
    denoiser: Denoiser,
    schedule: NoiseSchedule | None = None,
) -> TapBundle:
    if cond.t != 0:
        raise ValueError(f"condition latent must be clean (t=0), got t={cond.t}")
    schedule = schedule or NoiseSchedule()
    key = (int(t_effective), cfg.layers)
    bundle = cache.get(key)
    if bundle is not None:
        return bundle
    xc = structure_latent(cond, t_effective, cfg, schedule)
    bundle = denoiser.denoise(xc, t_effective, cfg.structure_prompt or prompt, cfg.layers)
    cache.put(key, bundle)
    return bundle


def injection_overrides(
    t: int,
    cond: LatentImage,
    prompt: str,
    cfg: InjectionConfig,
    cache: StructureCache,
    denoiser: Denoiser,
    schedule: NoiseSchedule | None = None,
) -> InjectionOverrides:
    """Overrides for the output branch at step ``t`` (empty outside the window)."""
    schedule = schedule or NoiseSchedule()
    if not cfg.enabled or not cfg.in_window(t, schedule):
        return InjectionOverrides()
    taps = structure_taps(cond, cfg.effective_timestep(t, schedule), prompt, cfg, cache, denoiser, schedule)
    return InjectionOverrides(
        features=dict(taps.features) if cfg.inject_features else {},
        attentions=dict(taps.attentions) if cfg.inject_attention else {},
    )


def controlled_step(
    x: LatentImage,
    t: int,
    t_prev: int,
    cond: LatentImage | None,
    prompt: str,
    cfg: InjectionConfig,
    cache: StructureCache,
    denoiser: Denoiser,
    schedule: NoiseSchedule | None = None,
    *,
    eta: float = 1.0,
    seed: SeedLike = None,
    appearance: Mapping[str, np.ndarray] | None = None,
    appearance_eps: float = 1e-6,
    clip_x0: float | None = None,
) -> LatentImage:
    """One output-branch DDIM step with structure (and optional appearance) control."""
    schedule = schedule or NoiseSchedule()
    if cond is not None:
        overrides = injection_overrides(t, cond, prompt, cfg, cache, denoiser, schedule)
    else:
        overrides = InjectionOverrides()
    if appearance:
        overrides.appearance = dict(appearance)
        overrides.appearance_eps = appearance_eps
    out = denoiser.denoise(x, t, prompt, (), overrides or None)
    return schedule.ddim_step(x, out.eps_pred, t, t_prev, eta=eta, seed=seed, clip_x0=clip_x0)
