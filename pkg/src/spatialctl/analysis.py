"""Feature-domain-gap measurements between natural images and condition images.

Everything works on plain arrays; :func:`gap_curves` wires them to a denoiser
and a paired dataset across a timestep grid.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .scheduler import LatentImage, NoiseSchedule

Extractor = Callable[[np.ndarray], np.ndarray]


# -- PCA -------------------------------------------------------------------------

@dataclass(frozen=True)
class Component:
    vector: np.ndarray
    mean: np.ndarray
    variance: float

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.vector


def first_component(x: np.ndarray) -> Component:
    """Leading principal axis of the rows of ``x`` (population covariance).

    The sign is fixed so the largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an n x F array with n >= 2, got shape {x.shape}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    v = vt[0]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return Component(v, mean, float(s[0] ** 2 / x.shape[0]))


def pca_first_component(features: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Project every image's ``HW x F`` features onto the pooled first component."""
    comp = first_component(np.concatenate([np.asarray(f, dtype=np.float64) for f in features]))
    return [comp.project(f) for f in features]


# -- KDE / KL ------------------------------------------------------------------------

def kde_kl(p_samples: np.ndarray, q_samples: np.ndarray, grid_points: int = 1000, floor: float = 1e-12) -> float:
    """KL(P || Q) between Gaussian KDEs evaluated on a shared even grid."""
    p_samples = np.ravel(np.asarray(p_samples, dtype=np.float64))
    q_samples = np.ravel(np.asarray(q_samples, dtype=np.float64))
    both = np.concatenate([p_samples, q_samples])
    lo, hi = both.min(), both.max()
    if hi <= lo:
        return 0.0
    grid = np.linspace(lo, hi, grid_points)
    p = stats.gaussian_kde(p_samples, bw_method="scott")(grid)
    q = np.maximum(stats.gaussian_kde(q_samples, bw_method="scott")(grid), floor)
    p, q = p / p.sum(), q / q.sum()
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


# -- self-similarity -------------------------------------------------------------------

def gradient_histograms(image: np.ndarray, patch: int = 8, stride: int = 4, bins: int = 9,
                        floor: float = 1e-3) -> np.ndarray:
    """Per-patch unsigned gradient-orientation histograms of luminance.

    ``floor`` is added to every bin so flat patches still have a direction.
    """
    img = np.asarray(image, dtype=np.float64)
    lum = img.mean(axis=2) if img.ndim == 3 else img
    gy, gx = np.gradient(lum)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    idx = np.minimum((ang / np.pi * bins).astype(int), bins - 1)
    h, w = lum.shape
    out = []
    for y in range(0, h - patch + 1, stride):
        for x in range(0, w - patch + 1, stride):
            b = idx[y : y + patch, x : x + patch].ravel()
            m = mag[y : y + patch, x : x + patch].ravel()
            out.append(np.bincount(b, weights=m, minlength=bins))
    return np.asarray(out) + floor


def self_similarity(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.float64)
    norms = np.linalg.norm(keys, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("self-similarity is undefined for zero descriptors")
    unit = keys / norms
    return unit @ unit.T


def struct_distance(i1: np.ndarray, i2: np.ndarray, extractor: Extractor = gradient_histograms) -> float:
    return float(np.linalg.norm(self_similarity(extractor(i1)) - self_similarity(extractor(i2))))


# -- spectra ------------------------------------------------------------------------------

def spectrum(image: np.ndarray) -> np.ndarray:
    """Centered DFT magnitude, ``H x W x C``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    f = np.fft.fftshift(np.fft.fft2(img, axes=(0, 1), norm="ortho"), axes=(0, 1))
    return np.abs(f)


def dft_gap(i1: np.ndarray, i2: np.ndarray) -> float:
    return float(np.linalg.norm(spectrum(i1) - spectrum(i2)))


def high_frequency_mask(h: int, w: int, fraction: float = 1.0 / 6.0) -> np.ndarray:
    v, u = np.meshgrid(np.arange(h) - h // 2, np.arange(w) - w // 2, indexing="ij")
    return np.hypot(v, u) > fraction * min(h, w)


def hf_ratio(image: np.ndarray) -> float:
    energy = np.sum(spectrum(image) ** 2, axis=2)
    total = energy.sum()
    if total <= 0:
        return 0.0
    return float(energy[high_frequency_mask(*energy.shape)].sum() / total)


# -- curves ----------------------------------------------------------------------------------

@dataclass
class GapRecord:
    timestep: int
    condition_kind: str
    kl: float
    selfsim_l2: float
    dft_l2: float
    hf_ratio_nat: float
    hf_ratio_cond: float


COLUMNS = ("timestep", "condition_kind", "kl", "selfsim_l2", "dft_l2", "hf_ratio_nat", "hf_ratio_cond")
METRICS = COLUMNS[2:]


@dataclass
class GapCurve:
    records: list[GapRecord] = field(default_factory=list)

    @property
    def timesteps(self) -> list[int]:
        return sorted({r.timestep for r in self.records})

    @property
    def kinds(self) -> list[str]:
        return sorted({r.condition_kind for r in self.records})

    def series(self, metric: str, kind: str | None = None) -> np.ndarray:
        """Per-timestep values; mean over kinds unless ``kind`` is given."""
        out = []
        for t in self.timesteps:
            vals = [getattr(r, metric) for r in self.records if r.timestep == t and kind in (None, r.condition_kind)]
            out.append(np.mean(vals))
        return np.asarray(out)

    def spread(self, metric: str) -> np.ndarray:
        return np.asarray([
            np.std([getattr(r, metric) for r in self.records if r.timestep == t]) for t in self.timesteps
        ])

    def spearman(self, metric: str) -> float:
        rho = stats.spearmanr(self.timesteps, self.series(metric)).statistic
        return float(rho)

    def hf_gap(self, high: str = "edge", low: str = "mask") -> np.ndarray:
        return self.series("hf_ratio_cond", high) - self.series("hf_ratio_cond", low)

    def summary(self) -> dict:
        out = {
            "timesteps": self.timesteps,
            "kinds": self.kinds,
            "spearman": {m: self.spearman(m) for m in ("kl", "selfsim_l2", "dft_l2")},
            "mean": {m: self.series(m).tolist() for m in METRICS},
            "std": {m: self.spread(m).tolist() for m in METRICS},
        }
        if {"edge", "mask"} <= set(self.kinds):
            gap = self.hf_gap()
            out["hf_gap_edge_minus_mask"] = gap.tolist()
            out["hf_gap_final_over_initial"] = float(gap[-1] / gap[0]) if gap[0] != 0 else math.nan
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in sorted(self.records, key=lambda r: (r.timestep, r.condition_kind)):
            writer.writerow([r.timestep, r.condition_kind] + [repr(float(getattr(r, m))) for m in METRICS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"records": [asdict(r) for r in self.records], "summary": self.summary()}, indent=2)


def default_grid(points: int = 10, schedule: NoiseSchedule | None = None) -> list[int]:
    schedule = schedule or NoiseSchedule()
    return [int(v) for v in np.round(np.linspace(1, schedule.T - schedule.T // 50 + 1, points))]


def _to_image(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


def gap_curves(
    pairs,
    denoiser,
    timesteps: Sequence[int] | None = None,
    *,
    layer: str = "dec1",
    seed: int = 0,
    schedule: NoiseSchedule | None = None,
    extractor: Extractor = gradient_histograms,
    batch: int = 64,
) -> GapCurve:
    """Measure the natural/condition gap per timestep and condition kind.

    Both images of a scene share one noise draw, so differences come from the
    content alone.
    """
    schedule = schedule or NoiseSchedule()
    timesteps = list(timesteps or default_grid(schedule=schedule))
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to analyse")
    kinds = sorted({p.condition_kind for p in pairs})
    scene_ids = sorted({p.scene_id for p in pairs})
    natural = {p.scene_id: p for p in pairs}
    shape = pairs[0].natural.shape
    noise = {sid: np.random.default_rng([seed, sid]).standard_normal(shape) for sid in scene_ids}

    def run(latents: list[LatentImage], prompts: list[str], t: int):
        feats, clean = [], []
        for i in range(0, len(latents), batch):
            chunk = latents[i : i + batch]
            xt = np.stack([schedule.forward_diffuse(x, t, noise_for).data for x, noise_for in chunk])
            out = denoiser.denoise_batch(xt, t, prompts[i : i + batch], (layer,))
            feats.extend(out.features[layer])
            a = schedule.ab(t)
            clean.extend((xt - np.sqrt(1 - a) * out.eps_pred) / np.sqrt(a))
        return feats, [_to_image(c) for c in clean]

    curve = GapCurve()
    for t in timesteps:
        nat_feats, nat_clean = run(
            [(natural[s].natural, noise[s]) for s in scene_ids], [natural[s].prompt for s in scene_ids], t
        )
        nat_by_scene = {s: (f, c) for s, f, c in zip(scene_ids, nat_feats, nat_clean)}
        for kind in kinds:
            group = [p for p in pairs if p.condition_kind == kind]
            latents = [(p.condition, noise[p.scene_id]) for p in group]
            cond_feats, cond_clean = run(latents, [p.prompt for p in group], t)
            nf = [nat_by_scene[p.scene_id][0] for p in group]
            proj = pca_first_component(list(nf) + list(cond_feats))
            q = np.concatenate(proj[: len(group)])
            p_ = np.concatenate(proj[len(group) :])
            selfsim, dft, hf_n, hf_c = [], [], [], []
            for pair, cc in zip(group, cond_clean):
                nc = nat_by_scene[pair.scene_id][1]
                selfsim.append(struct_distance(pair.condition_image, cc, extractor))
                dft.append(dft_gap(nc, cc))
                hf_n.append(hf_ratio(nc))
                hf_c.append(hf_ratio(cc))
            curve.records.append(GapRecord(
                int(t), kind, kde_kl(p_, q), float(np.mean(selfsim)), float(np.mean(dft)),
                float(np.mean(hf_n)), float(np.mean(hf_c)),
            ))
    return curve
