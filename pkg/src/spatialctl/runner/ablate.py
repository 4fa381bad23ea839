"""Paired-seed ablation drivers over injection C, restart and prompt enrichment."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import analysis, arp
from ..denoiser import Denoiser, SamplePair
from ..scheduler import LatentImage
from .config import RunConfig
from .generate import generate_from_latent
from .pipeline import restart_point

AXES = ("injection_C", "restart_on_off", "arp_on_off")
PATCH = 4


@dataclass
class AblationReport:
    axis: str
    settings: list
    metrics: dict[str, dict[str, list[float]]] = field(default_factory=dict)  # metric -> setting -> per-run

    def add(self, metric: str, setting, value: float) -> None:
        self.metrics.setdefault(metric, {}).setdefault(str(setting), []).append(float(value))

    def values(self, metric: str, setting) -> np.ndarray:
        return np.asarray(self.metrics[metric][str(setting)])

    def table(self) -> list[dict]:
        rows = []
        for s in self.settings:
            row = {"setting": str(s)}
            for m in sorted(self.metrics):
                v = self.values(m, s)
                row[f"{m}_mean"] = float(v.mean())
                row[f"{m}_median"] = float(np.median(v))
            rows.append(row)
        return rows

    def to_csv(self) -> str:
        rows = self.table()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"axis": self.axis, "settings": [str(s) for s in self.settings],
                           "metrics": self.metrics, "table": self.table()}, indent=2)


def leakage_proxy(output: np.ndarray, condition: np.ndarray) -> float:
    """Higher means the output sits closer to the raw condition image."""
    return -(analysis.dft_gap(output, condition) + float(np.linalg.norm(output - condition)))


def _seeded(cfg: RunConfig, seed: int, extra: Sequence[str] = ()) -> RunConfig:
    return cfg.with_settings([f"run.seed={seed}", *extra])


def ablate_injection_c(pairs: Sequence[SamplePair], grid: Sequence[int], cfg: RunConfig,
                       denoiser: Denoiser) -> AblationReport:
    """Sweep the structure-branch timestep; ``grid`` is in timesteps (0 = clean condition)."""
    schedule = cfg.schedule.build()
    report = AblationReport("injection_C", [int(t) for t in grid])
    for i, pair in enumerate(pairs):
        for t in report.settings:
            c = schedule.to_normalized(t)
            gen = generate_from_latent(pair.condition, pair.prompt, _seeded(cfg, i, [f"injection.C={c!r}"]), denoiser)
            report.add("struct_distance", t, analysis.struct_distance(gen.output, pair.natural_image))
            report.add("leakage", t, leakage_proxy(gen.output, pair.condition_image))
    return report


def patch_artifact(seed: int, size: int, value: float = 3.0):
    """Harness hook: overwrite a seeded 4x4 patch of the clean estimate."""
    rng = np.random.default_rng([seed, 4242])
    y, x = (int(v) for v in rng.integers(2, size - PATCH - 2, size=2))

    def hook(xt: LatentImage, eps: np.ndarray, schedule) -> LatentImage:
        a = schedule.ab(xt.t)
        x0 = (xt.data - np.sqrt(1 - a) * eps) / np.sqrt(a)
        x0[y : y + PATCH, x : x + PATCH, :] = value
        return LatentImage(np.sqrt(a) * x0 + np.sqrt(1 - a) * eps, xt.t)

    return hook, (slice(y, y + PATCH), slice(x, x + PATCH))


def _bind(hook, schedule):
    return lambda xt, eps: hook(xt, eps, schedule)


def ablate_restart(pairs: Sequence[SamplePair], cfg: RunConfig, denoiser: Denoiser,
                   value: float = 3.0) -> AblationReport:
    """Each variant is compared with its own artifact-free twin over the patch."""
    report = AblationReport("restart_on_off", ["off", "on"])
    schedule = cfg.schedule.build()
    on = cfg if cfg.restart.N > 0 else cfg.with_settings(["restart.N=3"])
    off = cfg.with_settings(["restart.N=0"])
    t_at = restart_point(on, schedule)
    for i, pair in enumerate(pairs):
        hook, region = patch_artifact(i, cfg.run.size, value)
        for name, variant in (("off", off), ("on", on)):
            v = _seeded(variant, i)
            clean = generate_from_latent(pair.condition, pair.prompt, v, denoiser)
            dirty = generate_from_latent(pair.condition, pair.prompt, v, denoiser,
                                         artifact=_bind(hook, schedule), artifact_t=t_at)
            err = float(np.linalg.norm(dirty.output[region] - clean.output[region]))
            report.add("artifact_l2", name, err)
    return report


def ablate_arp(pairs: Sequence[SamplePair], cfg: RunConfig, denoiser: Denoiser,
               client: arp.LlmClient) -> AblationReport:
    report = AblationReport("arp_on_off", ["off", "on"])
    for i, pair in enumerate(pairs):
        off = generate_from_latent(pair.condition, pair.prompt, _seeded(cfg, i, ["arp.enabled=false"]), denoiser)
        before = len(getattr(client, "calls", []))
        on = generate_from_latent(pair.condition, pair.prompt, _seeded(cfg, i, ["arp.enabled=true"]), denoiser, client)
        report.add("client_calls", "on", len(getattr(client, "calls", [])) - before)
        report.add("client_calls", "off", 0)
        report.add("prompt_changed", "on", float(on.record.prompt_app != pair.prompt))
        report.add("prompt_changed", "off", float(off.record.prompt_app != pair.prompt))
        app_on, app_off = on.images.get("appearance"), off.images.get("appearance")
        differs = app_on is not None and app_off is not None and not np.array_equal(app_on, app_off)
        report.add("appearance_changed", "on", float(differs))
        report.add("appearance_changed", "off", 0.0)
    return report


def ablate(axis: str, grid, pairs: Sequence[SamplePair], cfg: RunConfig, denoiser: Denoiser,
           client: arp.LlmClient | None = None) -> AblationReport:
    if axis == "injection_C":
        return ablate_injection_c(pairs, grid, cfg, denoiser)
    if axis == "restart_on_off":
        return ablate_restart(pairs, cfg, denoiser)
    if axis == "arp_on_off":
        return ablate_arp(pairs, cfg, denoiser, client or arp.client_from_env())
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
