"""End-to-end generation: condition prep, prompt enrichment, sampling, persistence."""
from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import analysis, arp, condprep
from ..denoiser import Denoiser
from ..denoiser.dataset import load_png, to_image, to_latent
from ..scheduler import LatentImage
from .config import RunConfig
from .models import load_denoiser
from .pipeline import Trajectory, expected_calls, run_trajectory
from .record import RunRecord


@dataclass
class Generation:
    record: RunRecord
    images: dict[str, np.ndarray]
    trajectory: Trajectory

    @property
    def output(self) -> np.ndarray:
        return self.images["output"]


def make_client(cfg: RunConfig) -> arp.LlmClient:
    kind = cfg.arp.client
    if kind == "env":
        return arp.client_from_env()
    env = {arp.client.ENV_CLIENT: kind}
    if cfg.arp.fixtures:
        env[arp.client.ENV_FIXTURES] = cfg.arp.fixtures
    return arp.client_from_env({**os.environ, **env})


def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def generate_from_latent(
    cond: LatentImage | None,
    prompt: str,
    cfg: RunConfig,
    denoiser: Denoiser | None = None,
    client: arp.LlmClient | None = None,
    **trajectory_kwargs,
) -> Generation:
    started = time.perf_counter()
    denoiser = denoiser or load_denoiser(cfg.run.weights)
    prep_meta = None
    cond_used = cond
    if cond is not None and cfg.condprep.enabled:
        result = condprep.prepare(to_image(cond), cfg.condprep.prep)
        prep_meta = result.metadata(cfg.condprep.prep)
        cond_used = to_latent(result.image)
    arp_meta, prompt_app = None, prompt
    if cfg.arp.enabled and cond is not None:
        enriched = arp.run_enrich(cond, prompt, client or make_client(cfg))
        arp_meta, prompt_app = enriched.to_json(), enriched.prompt_app
    before = time.perf_counter()
    traj = run_trajectory(denoiser, cond_used, prompt, prompt_app, cfg, **trajectory_kwargs)
    images = {"output": to_image(traj.output)}
    if traj.appearance is not None:
        images["appearance"] = to_image(traj.appearance)
    metrics = {}
    if cond_used is not None:
        images["condition"] = to_image(cond_used)
        out, c = images["output"], images["condition"]
        metrics = {
            "struct_distance_to_condition": analysis.struct_distance(out, c),
            "dft_gap_to_condition": analysis.dft_gap(out, c),
            "pixel_l2_to_condition": float(np.linalg.norm(out - c)),
        }
    record = RunRecord(
        config=cfg.to_dict(),
        prompt=prompt,
        prompt_app=prompt_app,
        cache=traj.cache,
        calls=traj.calls,
        expected_calls=expected_calls(cfg, with_condition=cond_used is not None),
        steps=traj.steps,
        metrics=metrics,
        arp=arp_meta,
        condprep=prep_meta,
        condition_sha256=_sha(cond.data) if cond is not None else None,
        weights_sha256=denoiser.weights().checksum(),
        restart_at=traj.restart_at,
        wall_clock={"total_s": time.perf_counter() - started, "sampling_s": time.perf_counter() - before},
    )
    return Generation(record, images, traj)


def load_condition(path: Path | str, size: int | None = None) -> LatentImage:
    img = load_png(Path(path))
    if size is not None and img.shape[:2] != (size, size):
        raise ValueError(f"condition image is {img.shape[1]}x{img.shape[0]}, expected {size}x{size}")
    return to_latent(img)


def generate(
    cond_path: Path | str | None,
    prompt: str,
    cfg: RunConfig,
    out_dir: Path | str | None = None,
    denoiser: Denoiser | None = None,
    client: arp.LlmClient | None = None,
) -> RunRecord:
    """Generate one image and persist the run directory; returns the record."""
    cond = load_condition(cond_path, cfg.run.size) if cond_path is not None else None
    gen = generate_from_latent(cond, prompt, cfg, denoiser, client)
    if out_dir is None:
        key = hashlib.sha256((cfg.to_ini() + prompt + (gen.record.condition_sha256 or "")).encode()).hexdigest()
        out_dir = Path(cfg.run.output_dir) / f"run-{cfg.run.seed}-{key[:10]}"
    gen.record.save(Path(out_dir), gen.images)
    return gen.record
