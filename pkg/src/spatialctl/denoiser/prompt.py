"""Hash-bag prompt encoder (unigrams + bigrams, signed feature hashing)."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

EMBED_DIM = 128
_TOKEN = re.compile(r"[a-z0-9']+")


def tokenize(prompt: str) -> list[str]:
    return _TOKEN.findall(prompt.lower())


def _bucket(token: str, dim: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    h = int.from_bytes(digest, "little")
    return h % dim, 1.0 if (h >> 63) & 1 else -1.0


@dataclass(frozen=True)
class PromptEmbedding:
    vector: np.ndarray

    @classmethod
    def encode(cls, prompt: str, dim: int = EMBED_DIM) -> "PromptEmbedding":
        tokens = tokenize(prompt)
        grams = tokens + [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]
        vec = np.zeros(dim, dtype=np.float32)
        for g in grams:
            idx, sign = _bucket(g, dim)
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        vec.setflags(write=False)
        return cls(vec)


def encode(prompt: str) -> PromptEmbedding:
    return PromptEmbedding.encode(prompt)
