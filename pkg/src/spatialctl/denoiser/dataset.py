"""Procedural shapes scenes with edge / silhouette / mask conditions.

Images are ``H x W x 3`` float arrays in ``[0, 1]``; ``SamplePair`` holds them
as clean latents in model space ``[-1, 1]``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..scheduler import LatentImage

CONDITION_KINDS = ("edge", "silhouette", "mask")
MIN_SIZE = 16
SUPERSAMPLE = 4

PALETTE = {
    "red": (0.86, 0.16, 0.16),
    "green": (0.16, 0.70, 0.24),
    "blue": (0.16, 0.27, 0.86),
    "yellow": (0.92, 0.82, 0.16),
    "purple": (0.59, 0.24, 0.75),
    "orange": (0.94, 0.55, 0.12),
    "white": (0.95, 0.95, 0.95),
    "black": (0.06, 0.06, 0.06),
}


@dataclass
class Shape:
    kind: str  # circle | rect | triangle
    color: str
    params: list[float]  # in [0, 1] image coordinates

    @property
    def noun(self) -> str:
        if self.kind == "circle":
            return "circle"
        if self.kind == "triangle":
            return "triangle"
        x0, y0, x1, y1 = self.params
        aspect = (x1 - x0) / max(y1 - y0, 1e-6)
        return "square" if 0.75 <= aspect <= 1.33 else "rectangle"

    @property
    def center_x(self) -> float:
        p = self.params
        if self.kind == "circle":
            return p[0]
        if self.kind == "rect":
            return 0.5 * (p[0] + p[2])
        return (p[0] + p[2] + p[4]) / 3.0

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "circle":
            return (x - p[0]) ** 2 + (y - p[1]) ** 2 <= p[2] ** 2
        if self.kind == "rect":
            return (x >= p[0]) & (x <= p[2]) & (y >= p[1]) & (y <= p[3])
        if self.kind == "triangle":
            (ax, ay, bx, by, cx, cy) = p
            d1 = (x - bx) * (ay - by) - (ax - bx) * (y - by)
            d2 = (x - cx) * (by - cy) - (bx - cx) * (y - cy)
            d3 = (x - ax) * (cy - ay) - (cx - ax) * (y - ay)
            neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
            pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
            return ~(neg & pos)
        raise ValueError(f"unknown shape kind {self.kind!r}")


@dataclass
class Scene:
    shapes: list[Shape]
    background: tuple[tuple[float, float, float], tuple[float, float, float]]
    gradient_angle: float

    def prompt(self) -> str:
        ordered = sorted(self.shapes, key=lambda s: s.center_x)
        words = [f"a {s.color} {s.noun}" for s in ordered]
        text = words[0]
        if len(words) > 1:
            text += f" left of {words[1]}"
        for extra in words[2:]:
            text += f" and {extra}"
        return text


@dataclass
class SamplePair:
    natural: LatentImage
    condition: LatentImage
    prompt: str
    condition_kind: str
    scene_id: int = 0
    scene: Scene | None = field(default=None, repr=False, compare=False)

    @property
    def natural_image(self) -> np.ndarray:
        return to_image(self.natural)

    @property
    def condition_image(self) -> np.ndarray:
        return to_image(self.condition)


def to_latent(image: np.ndarray) -> LatentImage:
    return LatentImage(2.0 * np.asarray(image, dtype=np.float64) - 1.0, 0)


def to_image(latent: LatentImage | np.ndarray) -> np.ndarray:
    data = latent.data if isinstance(latent, LatentImage) else np.asarray(latent)
    return np.clip((data + 1.0) / 2.0, 0.0, 1.0)


# -- rendering -----------------------------------------------------------------

def _grid(size: int, factor: int) -> tuple[np.ndarray, np.ndarray]:
    n = size * factor
    coords = (np.arange(n) + 0.5) / n
    return np.meshgrid(coords, coords, indexing="xy")


def coverage_maps(scene: Scene, size: int) -> np.ndarray:
    """Per-shape anti-aliased coverage, ``n_shapes x H x W`` in [0, 1]."""
    x, y = _grid(size, SUPERSAMPLE)
    maps = []
    for shape in scene.shapes:
        hit = shape.inside(x, y).astype(np.float64)
        maps.append(hit.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3)))
    return np.stack(maps) if maps else np.zeros((0, size, size))


def label_map(scene: Scene, size: int) -> np.ndarray:
    """Topmost shape index per pixel (``-1`` background), at half coverage."""
    cov = coverage_maps(scene, size)
    labels = np.full((size, size), -1, dtype=np.int64)
    for i, c in enumerate(cov):
        labels[c >= 0.5] = i
    return labels


def render_natural(scene: Scene, size: int) -> np.ndarray:
    x, y = _grid(size, 1)
    a = scene.gradient_angle
    ramp = (np.cos(a) * (x - 0.5) + np.sin(a) * (y - 0.5)) / np.sqrt(0.5) + 0.5
    ramp = np.clip(ramp, 0.0, 1.0)[..., None]
    c0, c1 = (np.asarray(c) for c in scene.background)
    img = (1.0 - ramp) * c0 + ramp * c1
    for shape, cov in zip(scene.shapes, coverage_maps(scene, size)):
        color = np.asarray(PALETTE[shape.color])
        img = (1.0 - cov[..., None]) * img + cov[..., None] * color
    return np.clip(img, 0.0, 1.0)


def render_condition(scene: Scene, size: int, kind: str) -> np.ndarray:
    labels = label_map(scene, size)
    if kind == "mask":
        gray = (labels >= 0).astype(np.float64)
    elif kind == "silhouette":
        n = max(len(scene.shapes), 1)
        gray = np.zeros((size, size))
        for i in range(len(scene.shapes)):
            gray[labels == i] = 0.35 + 0.65 * (i + 1) / n
    elif kind == "edge":
        gray = np.zeros((size, size))
        gray[:, :-1] += labels[:, :-1] != labels[:, 1:]
        gray[:-1, :] += labels[:-1, :] != labels[1:, :]
        gray = (gray > 0).astype(np.float64)
    else:
        raise ValueError(f"unknown condition kind {kind!r}; expected one of {CONDITION_KINDS}")
    return np.repeat(gray[..., None], 3, axis=2)


def random_scene(rng: np.random.Generator) -> Scene:
    n = int(rng.integers(2, 5))
    colors = list(PALETTE)
    # horizontal slots keep "left of" well defined
    slots = np.sort(rng.uniform(0.18, 0.82, size=n))
    shapes = []
    for cx in slots:
        kind = str(rng.choice(["circle", "rect", "triangle"]))
        color = str(rng.choice(colors))
        cy = float(rng.uniform(0.22, 0.78))
        s = float(rng.uniform(0.11, 0.22))
        if kind == "circle":
            params = [float(cx), cy, s]
        elif kind == "rect":
            w, h = s * rng.uniform(0.7, 1.4), s * rng.uniform(0.7, 1.4)
            params = [float(cx - w), cy - h, float(cx + w), cy + h]
        else:
            angle = rng.uniform(0, 2 * np.pi)
            pts = []
            for k in range(3):
                a = angle + 2 * np.pi * k / 3
                pts += [float(cx + 1.2 * s * np.cos(a)), float(cy + 1.2 * s * np.sin(a))]
            params = pts
        shapes.append(Shape(kind, color, params))
    bg = tuple(tuple(float(v) for v in rng.uniform(0.25, 0.75, size=3)) for _ in range(2))
    return Scene(shapes, bg, float(rng.uniform(0, 2 * np.pi)))


def make_pairs(scene: Scene, size: int, scene_id: int = 0, kinds=CONDITION_KINDS) -> list[SamplePair]:
    natural = to_latent(render_natural(scene, size))
    prompt = scene.prompt()
    return [
        SamplePair(natural, to_latent(render_condition(scene, size, k)), prompt, k, scene_id, scene)
        for k in kinds
    ]


def generate_dataset(n: int, size: int = 32, seed: int = 0, kinds=CONDITION_KINDS) -> list[SamplePair]:
    """``n`` scenes, each expanded into one ``SamplePair`` per condition kind."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < MIN_SIZE:
        raise ValueError(f"size must be >= {MIN_SIZE}, got {size}")
    rng = np.random.default_rng(seed)
    pairs: list[SamplePair] = []
    for i in range(n):
        pairs.extend(make_pairs(random_scene(rng), size, i, kinds))
    return pairs


def naturals(pairs: list[SamplePair]) -> list[SamplePair]:
    """One pair per scene (the first kind), for training on natural images."""
    seen, out = set(), []
    for p in pairs:
        if p.scene_id not in seen:
            seen.add(p.scene_id)
            out.append(p)
    return out


# -- persistence -----------------------------------------------------------------

def save_png(path: Path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def load_png(path: Path, channels: int = 3) -> np.ndarray:
    img = Image.open(path)
    img = img.convert("RGB" if channels == 3 else "L")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def write_dataset(pairs: list[SamplePair], root: Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries: dict[int, dict] = {}
    for p in pairs:
        entry = entries.setdefault(
            p.scene_id,
            {
                "id": p.scene_id,
                "prompt": p.prompt,
                "natural": f"images/{p.scene_id:05d}_natural.png",
                "conditions": {},
                "scene": asdict(p.scene) if p.scene is not None else None,
            },
        )
        if "_saved" not in entry:
            save_png(root / entry["natural"], p.natural_image)
            entry["_saved"] = True
        rel = f"images/{p.scene_id:05d}_{p.condition_kind}.png"
        save_png(root / rel, p.condition_image)
        entry["conditions"][p.condition_kind] = rel
    index = [{k: v for k, v in e.items() if k != "_saved"} for e in entries.values()]
    path = root / "index.json"
    path.write_text(json.dumps({"version": 1, "pairs": index}, indent=2))
    return path


def read_dataset(root: Path) -> list[SamplePair]:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    pairs = []
    for e in index["pairs"]:
        natural = to_latent(load_png(root / e["natural"]))
        for kind, rel in e["conditions"].items():
            cond = to_latent(np.repeat(load_png(root / rel, channels=1), 3, axis=2))
            pairs.append(SamplePair(natural, cond, e["prompt"], kind, e["id"]))
    return pairs
