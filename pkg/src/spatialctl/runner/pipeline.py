"""Three-branch generation: structure branch, appearance branch, output branch."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..appearance import appearance_branch_step
from ..denoiser import Denoiser
from ..injection import StructureCache, controlled_step
from ..restart import cycle_grid, restart_refine, self_recur_step
from ..scheduler import LatentImage, NoiseSchedule
from .config import RunConfig

Artifact = Callable[[LatentImage, np.ndarray], LatentImage]


@dataclass
class Trajectory:
    output: LatentImage
    appearance: LatentImage | None
    steps: list[dict] = field(default_factory=list)
    cache: dict[str, int] = field(default_factory=dict)
    calls: int = 0
    restart_at: int | None = None


def _seeds(seed: int, steps: int):
    root = np.random.SeedSequence(seed)
    init, app_init, main, app, restart = root.spawn(5)
    return init, app_init, main.spawn(steps), app.spawn(steps), restart


def initial_latent(seed: int, shape: tuple[int, int, int], schedule: NoiseSchedule) -> LatentImage:
    init = _seeds(seed, 1)[0]
    return LatentImage(np.random.default_rng(init).standard_normal(shape), schedule.T)


def ddim_sample(denoiser: Denoiser, prompt: str, steps: int = 50, eta: float = 1.0, seed: int = 0,
                size: int = 32, schedule: NoiseSchedule | None = None, clip_x0: float | None = None) -> LatentImage:
    """Plain sampler: no injection, appearance transfer or restart."""
    schedule = schedule or NoiseSchedule()
    grid = schedule.timesteps(steps)
    _, _, step_seeds, _, _ = _seeds(seed, steps)
    x = initial_latent(seed, (size, size, 3), schedule)
    for (t, t_prev), s in zip(zip(grid[:-1], grid[1:]), step_seeds):
        eps = denoiser.denoise(x, t, prompt).eps_pred
        x = schedule.ddim_step(x, eps, t, t_prev, eta=eta, seed=s, clip_x0=clip_x0)
    return x


def restart_point(cfg: RunConfig, schedule: NoiseSchedule) -> int | None:
    """Grid timestep where the restart phase is entered (the snapped ``t_min``)."""
    if cfg.restart.N == 0:
        return None
    t_min, t_max = cfg.restart.bounds(schedule)
    grid = schedule.timesteps(cfg.run.steps)[1:]
    snapped = min(grid, key=lambda t: (abs(t - t_min), t))
    return snapped if snapped < t_max else None


def run_trajectory(
    denoiser: Denoiser,
    cond: LatentImage | None,
    prompt: str,
    prompt_app: str,
    cfg: RunConfig,
    *,
    artifact: Artifact | None = None,
    artifact_t: int | None = None,
) -> Trajectory:
    """Sample the output image under ``cfg``.

    ``artifact`` (test harness hook) rewrites the output latent once, right
    after the trajectory reaches ``artifact_t`` and before any restart there.
    """
    schedule = cfg.schedule.build()
    steps, eta, clip = cfg.run.steps, cfg.run.eta, cfg.run.clip_x0
    grid = schedule.timesteps(steps)
    _, app_init, step_seeds, app_seeds, restart_seed = _seeds(cfg.run.seed, steps)
    shape = (cfg.run.size, cfg.run.size, 3)
    x = initial_latent(cfg.run.seed, shape, schedule)
    use_app = bool(cfg.appearance.layers) and cfg.appearance.window[0] <= cfg.appearance.window[1]
    x_app = LatentImage(np.random.default_rng(app_init).standard_normal(shape), schedule.T) if use_app else None
    cache = StructureCache()
    restart_at = restart_point(cfg, schedule)
    log: list[dict] = []
    calls0 = denoiser.calls

    for i, (t, t_prev) in enumerate(zip(grid[:-1], grid[1:])):
        f_app = None
        if use_app:
            x_app, f_app = appearance_branch_step(
                x_app, t, t_prev, prompt_app, denoiser, cfg.appearance, schedule, eta=eta, seed=app_seeds[i],
                clip_x0=clip,
            )

        def stepper(z, a, b, seed, _f=f_app):
            return controlled_step(z, a, b, cond, prompt, cfg.injection, cache, denoiser, schedule,
                                   eta=eta, seed=seed, appearance=_f, appearance_eps=cfg.appearance.epsilon_var,
                                   clip_x0=clip)

        x = self_recur_step(x, t, t_prev, stepper, cfg.restart, schedule, seed=step_seeds[i])
        log.append({
            "phase": "main",
            "t": t,
            "t_prev": t_prev,
            "injected": cond is not None and cfg.injection.enabled and cfg.injection.in_window(t, schedule),
            "appearance": f_app is not None,
            "repeats": cfg.restart.N_prime if cfg.restart.recurs_at(t, schedule) else 1,
        })
        if artifact is not None and t_prev == artifact_t:
            eps = denoiser.denoise(x, t_prev, prompt).eps_pred
            x = artifact(x, eps)
        if t_prev == restart_at:
            trace: list = []

            def restart_stepper(z, a, b, seed):
                # appearance transfer stays off inside restart cycles
                return controlled_step(z, a, b, cond, prompt, cfg.injection, cache, denoiser, schedule,
                                       eta=cfg.run.restart_eta, seed=seed, clip_x0=clip)

            x = restart_refine(x, restart_stepper, cfg.restart, schedule, restart_seed, t_min=restart_at, trace=trace)
            log.extend({"phase": "restart", "event": e[0], "t": e[1], "t_prev": e[2]} for e in trace)
    return Trajectory(x, x_app, log, cache.counters(), denoiser.calls - calls0, restart_at)


def expected_calls(cfg: RunConfig, schedule: NoiseSchedule | None = None, with_condition: bool = True) -> int:
    """Closed-form denoiser call count for one :func:`run_trajectory` run."""
    schedule = schedule or cfg.schedule.build()
    grid = schedule.timesteps(cfg.run.steps)
    steps = grid[:-1]
    main = sum(cfg.restart.N_prime if cfg.restart.recurs_at(t, schedule) else 1 for t in steps)
    restart = cfg.restart.N * cfg.restart.S_steps if restart_point(cfg, schedule) is not None else 0
    lo, hi = cfg.appearance.window
    app = len(steps) if cfg.appearance.layers and lo <= hi else 0
    structure = 0
    if with_condition and cfg.injection.enabled:
        inj = cfg.injection
        visited = [t for t in steps if inj.in_window(t, schedule)]
        if restart:
            t_min, t_max = restart_point(cfg, schedule), cfg.restart.bounds(schedule)[1]
            visited += [t for t in cycle_grid(t_max, t_min, cfg.restart.S_steps)[:-1] if inj.in_window(t, schedule)]
        structure = len({inj.effective_timestep(t, schedule) for t in visited})
    return main + restart + app + structure
