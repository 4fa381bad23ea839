"""Epsilon-prediction training for the toy denoiser."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from ..scheduler import NoiseSchedule
from .core import Denoiser
from .dataset import SamplePair, naturals
from .model import ModelConfig, UNet
from .prompt import PromptEmbedding
from .weights import DenoiserWeights

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 2e-3
    warmup_steps: int = 50
    min_lr_frac: float = 0.05
    weight_decay: float = 0.0
    ema_decay: float = 0.995
    grad_clip: float = 1.0
    bf16: bool = True
    snr_gamma: float | None = None  # Min-SNR loss weighting; None keeps the plain ε loss


def _stack(pairs: Sequence[SamplePair]) -> tuple[torch.Tensor, torch.Tensor]:
    x = np.stack([np.transpose(p.natural.data, (2, 0, 1)) for p in pairs]).astype(np.float32)
    emb = np.stack([PromptEmbedding.encode(p.prompt).vector for p in pairs]).astype(np.float32)
    return torch.from_numpy(x), torch.from_numpy(emb)


def train(
    dataset: Sequence[SamplePair],
    epochs: int,
    seed: int = 0,
    config: TrainConfig = TrainConfig(),
    model_config: ModelConfig = ModelConfig(),
    schedule: NoiseSchedule | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> DenoiserWeights:
    """Train on the natural images of ``dataset``; returns EMA weights.

    The per-epoch mean loss is stored in ``weights.meta["loss_history"]``.
    """
    scenes = naturals(list(dataset))
    if not scenes:
        raise ValueError("dataset is empty")
    schedule = schedule or NoiseSchedule()
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = UNet(model_config).train()
    ema = copy.deepcopy(model).eval()
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    alpha_bar = torch.from_numpy(schedule.alpha_bar.astype(np.float32))
    x_all, emb_all = _stack(scenes)
    n = x_all.shape[0]
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total = max(1, epochs * steps_per_epoch)

    def lr_at(step: int) -> float:
        if step < config.warmup_steps:
            return config.lr * (step + 1) / config.warmup_steps
        frac = (step - config.warmup_steps) / max(1, total - config.warmup_steps)
        return config.lr * (config.min_lr_frac + (1 - config.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))

    history: list[float] = []
    step = 0
    started = time.time()
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        losses = []
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            x0, emb = x_all[idx], emb_all[idx]
            t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            a = alpha_bar[t][:, None, None, None]
            xt = a.sqrt() * x0 + (1 - a).sqrt() * eps
            with torch.autocast("cpu", dtype=torch.bfloat16, enabled=config.bf16):
                pred = model(xt, t, emb)
            per = torch.mean((pred.float() - eps) ** 2, dim=(1, 2, 3))
            if config.snr_gamma is not None:
                snr = a.flatten() / (1 - a.flatten())
                per = per * torch.clamp(snr, max=config.snr_gamma) / snr
            loss = per.mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch}, step {step} (lr={lr_at(step):.2e})"
                )
            for group in opt.param_groups:
                group["lr"] = lr_at(step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            with torch.no_grad():
                for pe, pm in zip(ema.parameters(), model.parameters()):
                    pe.mul_(config.ema_decay).add_(pm, alpha=1 - config.ema_decay)
            losses.append(loss.item())
            step += 1
        mean = float(np.mean(losses))
        history.append(mean)
        log.info("epoch %d/%d loss %.4f (%.0fs)", epoch + 1, epochs, mean, time.time() - started)
        if on_epoch:
            on_epoch(epoch, mean)
    with torch.no_grad():
        for be, bm in zip(ema.buffers(), model.buffers()):
            be.copy_(bm)
    meta = {
        "seed": seed,
        "epochs": epochs,
        "scenes": n,
        "train_config": asdict(config),
        "loss_history": history,
        "train_seconds": time.time() - started,
        "schedule": {"T": schedule.T, "beta_start": schedule.beta_start, "beta_end": schedule.beta_end},
    }
    return Denoiser(ema).weights(meta)


def initial_loss(dataset: Sequence[SamplePair], seed: int = 0, samples: int = 256,
                 model_config: ModelConfig = ModelConfig(), schedule: NoiseSchedule | None = None) -> float:
    """Loss of freshly initialised weights on random (x0, t, eps) triples."""
    schedule = schedule or NoiseSchedule()
    scenes = naturals(list(dataset))
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = UNet(model_config).eval()
    x_all, emb_all = _stack(scenes)
    idx = torch.randint(0, x_all.shape[0], (samples,), generator=gen)
    t = torch.randint(1, schedule.T + 1, (samples,), generator=gen)
    eps = torch.randn((samples,) + tuple(x_all.shape[1:]), generator=gen)
    a = torch.from_numpy(schedule.alpha_bar.astype(np.float32))[t][:, None, None, None]
    xt = a.sqrt() * x_all[idx] + (1 - a).sqrt() * eps
    with torch.no_grad():
        pred = model(xt, t, emb_all[idx])
    return float(torch.mean((pred - eps) ** 2))
