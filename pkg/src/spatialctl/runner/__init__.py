"""Orchestration: configs, the three-branch trajectory, run records, ablations and the CLI."""
from .ablate import AblationReport, ablate
from .config import ConfigError, RunConfig, load_config, preset
from .generate import Generation, generate, generate_from_latent
from .models import Recipe, ensure_weights, load_denoiser
from .pipeline import Trajectory, ddim_sample, expected_calls, run_trajectory
from .record import RunRecord

__all__ = [
    "AblationReport", "ConfigError", "Generation", "Recipe", "RunConfig", "RunRecord", "Trajectory",
    "ablate", "ddim_sample", "ensure_weights", "expected_calls", "generate", "generate_from_latent",
    "load_config", "load_denoiser", "preset", "run_trajectory",
]
