"""The standard trained toy denoiser: recipe, cache location and lazy training."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

from ..denoiser import Denoiser, DenoiserWeights, TrainConfig, generate_dataset, train

log = logging.getLogger(__name__)

ENV_CACHE = "SPATIALCTL_CACHE"


@dataclass(frozen=True)
class Recipe:
    scenes: int = 2048
    epochs: int = 14
    size: int = 32
    data_seed: int = 1
    seed: int = 0

    def digest(self) -> str:
        blob = json.dumps({"recipe": asdict(self), "train": asdict(TrainConfig())}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


STANDARD = Recipe()


def cache_dir() -> Path:
    return Path(os.environ.get(ENV_CACHE) or Path.home() / ".cache" / "spatialctl")


def weights_path(recipe: Recipe = STANDARD) -> Path:
    return cache_dir() / f"denoiser-{recipe.digest()}.bin"


def train_recipe(recipe: Recipe = STANDARD) -> DenoiserWeights:
    pairs = generate_dataset(recipe.scenes, recipe.size, seed=recipe.data_seed, kinds=("mask",))
    weights = train(pairs, recipe.epochs, seed=recipe.seed)
    weights.meta["recipe"] = asdict(recipe)
    return weights


def ensure_weights(recipe: Recipe = STANDARD, path: Path | None = None) -> Path:
    path = Path(path) if path else weights_path(recipe)
    if not path.exists():
        log.info("training standard denoiser (%s) into %s", recipe, path)
        train_recipe(recipe).save(path)
    return path


def load_denoiser(path: Path | str | None = None, recipe: Recipe = STANDARD) -> Denoiser:
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"weights file {path} does not exist")
        return Denoiser.load(Path(path))
    return Denoiser.load(ensure_weights(recipe))
