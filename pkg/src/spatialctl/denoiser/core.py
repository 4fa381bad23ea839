from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .. import appearance
from ..scheduler import LatentImage
from .model import LAYERS, ForwardContext, ModelConfig, UNet
from .prompt import PromptEmbedding
from .weights import DenoiserWeights


@dataclass
class TapBundle:
    """Taps from one denoiser call for a single image.

    ``features[l]`` is ``HW x c`` (the value that entered attention, after any
    override); ``attentions[l]`` is the ``HW x HW`` post-softmax map.
    """

    features: dict[str, np.ndarray]
    attentions: dict[str, np.ndarray]
    eps_pred: np.ndarray


@dataclass
class InjectionOverrides:
    """Per-layer replacements for one denoiser call.

    ``appearance`` holds appearance-branch features ``f_app`` (``HW x c``); the
    layer's features are modulated by attention-weighted statistics of them.
    """

    features: dict[str, np.ndarray] = field(default_factory=dict)
    attentions: dict[str, np.ndarray] = field(default_factory=dict)
    appearance: dict[str, np.ndarray] = field(default_factory=dict)
    appearance_eps: float = 1e-6

    def __bool__(self) -> bool:
        return bool(self.features or self.attentions or self.appearance)

    def layers(self) -> set[str]:
        return set(self.features) | set(self.attentions) | set(self.appearance)


def _tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(a, dtype=np.float32))


def _embed(prompt: PromptEmbedding | str | np.ndarray) -> np.ndarray:
    if isinstance(prompt, str):
        return PromptEmbedding.encode(prompt).vector
    if isinstance(prompt, PromptEmbedding):
        return prompt.vector
    return np.asarray(prompt, dtype=np.float32)


class Denoiser:
    """Inference wrapper around :class:`UNet` (weights are treated as immutable)."""

    def __init__(self, model: UNet, meta: dict | None = None):
        self.model = model.eval()
        self.meta = dict(meta or {})
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._lock = threading.Lock()
        self._calls = 0

    @classmethod
    def untrained(cls, seed: int = 0, config: ModelConfig = ModelConfig()) -> "Denoiser":
        torch.manual_seed(seed)
        return cls(UNet(config))

    @classmethod
    def from_weights(cls, weights: DenoiserWeights) -> "Denoiser":
        model = UNet(ModelConfig.from_dict(weights.model))
        state = {k: torch.from_numpy(v) for k, v in weights.arrays.items()}
        model.load_state_dict(state)
        return cls(model, weights.meta)

    @classmethod
    def load(cls, path: Path) -> "Denoiser":
        return cls.from_weights(DenoiserWeights.load(path))

    def weights(self, meta: dict | None = None) -> DenoiserWeights:
        arrays = {k: v.detach().cpu().numpy().copy() for k, v in self.model.state_dict().items()}
        return DenoiserWeights(self.model.config.to_dict(), arrays, self.meta if meta is None else meta)

    @property
    def layers(self) -> tuple[str, ...]:
        return LAYERS

    @property
    def calls(self) -> int:
        return self._calls

    def reset_calls(self) -> None:
        with self._lock:
            self._calls = 0

    def _validate_layers(self, names: Iterable[str]) -> frozenset[str]:
        names = frozenset(names)
        unknown = names - set(LAYERS)
        if unknown:
            raise KeyError(f"unknown layer id(s) {sorted(unknown)}; expected a subset of {LAYERS}")
        return names

    def denoise(
        self,
        x: LatentImage,
        t: int,
        prompt: PromptEmbedding | str,
        taps_requested: Iterable[str] = (),
        overrides: InjectionOverrides | None = None,
    ) -> TapBundle:
        taps = self._validate_layers(taps_requested)
        ctx = ForwardContext(taps=taps)
        if overrides:
            self._validate_layers(overrides.layers())
            ctx.features = {k: _tensor(v)[None] for k, v in overrides.features.items()}
            ctx.attentions = {k: _tensor(v)[None] for k, v in overrides.attentions.items()}
            ctx.appearance = {
                k: _appearance_hook(_tensor(v)[None], overrides.appearance_eps, k)
                for k, v in overrides.appearance.items()
            }
        eps, feats, attns = self._run(x.data[None], np.array([t]), _embed(prompt)[None], ctx)
        return TapBundle(
            {k: v[0] for k, v in feats.items()},
            {k: v[0] for k, v in attns.items()},
            eps[0],
        )

    def denoise_batch(
        self,
        x: np.ndarray,
        t: int | Sequence[int],
        prompts: Sequence[PromptEmbedding | str] | np.ndarray,
        taps_requested: Iterable[str] = (),
    ) -> TapBundle:
        """Batched, override-free forward pass; tap arrays keep the batch axis."""
        x = np.asarray(x, dtype=np.float64)
        ts = np.broadcast_to(np.asarray(t), (x.shape[0],))
        emb = np.stack([_embed(p) for p in prompts]) if not isinstance(prompts, np.ndarray) else prompts
        ctx = ForwardContext(taps=self._validate_layers(taps_requested))
        eps, feats, attns = self._run(x, ts, emb, ctx)
        return TapBundle(feats, attns, eps)

    def _run(self, x: np.ndarray, t: np.ndarray, emb: np.ndarray, ctx: ForwardContext):
        with self._lock:
            self._calls += 1
        xt = _tensor(np.transpose(x, (0, 3, 1, 2)))
        with torch.inference_mode():
            out = self.model(xt, torch.from_numpy(np.array(t, dtype=np.int64)), _tensor(emb), ctx)
        eps = np.transpose(out.numpy(), (0, 2, 3, 1)).astype(np.float64)
        feats = {k: v.numpy() for k, v in ctx.captured_features.items()}
        attns = {k: v.numpy() for k, v in ctx.captured_attentions.items()}
        return eps, feats, attns


def _appearance_hook(f_app: torch.Tensor, eps: float, layer: str):
    def hook(f_out: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor) -> torch.Tensor:
        if f_app.shape != f_out.shape:
            raise ValueError(
                f"appearance features for layer {layer!r} have shape {tuple(f_app.shape)}, "
                f"expected {tuple(f_out.shape)}"
            )
        return appearance.transfer(f_out, f_app, w_q, w_k, eps=eps, layer=layer)

    return hook
