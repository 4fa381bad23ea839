"""LLM client interface, the fixture-replay mock, the echo mock and a live HTTP client."""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import urllib.request
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from ..scheduler import LatentImage
from . import templates

log = logging.getLogger(__name__)

ENV_CLIENT = "SPATIALCTL_LLM"
ENV_FIXTURES = "SPATIALCTL_FIXTURES"
ENV_ENDPOINT = "SPATIALCTL_LLM_ENDPOINT"
ENV_KEY = "SPATIALCTL_LLM_KEY"
ENV_MODEL = "SPATIALCTL_LLM_MODEL"

DEFAULT_FIXTURES = Path(__file__).with_name("fixtures")


class LlmError(RuntimeError):
    pass


class FixtureMissing(LlmError, KeyError):
    pass


class LlmClient(Protocol):
    def send(self, text_prompt: str, image: LatentImage | None = None, *, stage: str = "") -> str: ...


def image_bytes(image: LatentImage | None) -> bytes:
    if image is None:
        return b""
    data = np.ascontiguousarray(image.data, dtype="<f8")
    return repr(data.shape).encode() + data.tobytes()


def content_hash(text_prompt: str, image: LatentImage | None = None) -> str:
    h = hashlib.sha256(text_prompt.encode("utf-8"))
    h.update(b"\x00")
    h.update(image_bytes(image))
    return h.hexdigest()


class MockClient:
    """Replays replies stored as ``<root>/<stage>/<sha256>.txt``."""

    def __init__(self, root: Path | str = DEFAULT_FIXTURES):
        self.root = Path(root)
        self.calls: list[tuple[str, str]] = []

    def path_for(self, stage: str, text_prompt: str, image: LatentImage | None = None) -> Path:
        return self.root / stage / f"{content_hash(text_prompt, image)}.txt"

    def send(self, text_prompt: str, image: LatentImage | None = None, *, stage: str = "") -> str:
        path = self.path_for(stage, text_prompt, image)
        self.calls.append((stage, path.name))
        if not path.is_file():
            raise FixtureMissing(f"no fixture for stage {stage!r} at {path}")
        return path.read_text(encoding="utf-8")

    def record(self, stage: str, text_prompt: str, reply: str, image: LatentImage | None = None) -> Path:
        path = self.path_for(stage, text_prompt, image)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(reply, encoding="utf-8")
        return path


class EchoClient:
    """Identity stand-in: no objects found, inputs handed back unchanged."""

    def __init__(self):
        self.calls: list[str] = []

    def send(self, text_prompt: str, image: LatentImage | None = None, *, stage: str = "") -> str:
        self.calls.append(stage)
        if stage == "stage1":
            return "{}"
        head, _, tail = text_prompt.rpartition("Dictionary: ")
        dictionary, _, sentence = tail.partition("\nInput sentence: ")
        return dictionary if stage == "stage2" else sentence.rstrip("\n")


class HttpClient:
    """OpenAI-compatible chat-completions client.  Defaults are unvalidated."""

    def __init__(self, endpoint: str, api_key: str = "", model: str = "gpt-4o",
                 temperature: float = 0.0, timeout: float = 60.0, retries: int = 2):
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self.retries = retries

    def _content(self, text_prompt: str, image: LatentImage | None) -> list[dict]:
        if image is None:
            return [{"type": "text", "text": text_prompt}]
        before, _, after = text_prompt.partition(templates.IMAGE_SLOT)
        buf = io.BytesIO()
        arr = np.round(np.clip((image.data + 1.0) / 2.0, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr).save(buf, format="PNG")
        url = "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()
        parts = [{"type": "text", "text": before}] if before else []
        parts.append({"type": "image_url", "image_url": {"url": url}})
        return parts + [{"type": "text", "text": after}]

    def send(self, text_prompt: str, image: LatentImage | None = None, *, stage: str = "") -> str:
        body = json.dumps({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": self._content(text_prompt, image)}],
        }).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                req = urllib.request.Request(self.endpoint, body, headers)
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read())
                return payload["choices"][0]["message"]["content"]
            except (OSError, KeyError, IndexError, ValueError) as exc:
                last = exc
                log.warning("LLM request failed (attempt %d): %s", attempt + 1, exc)
        raise LlmError(f"LLM request to {self.endpoint} failed") from last


def client_from_env(env: dict[str, str] | None = None) -> LlmClient:
    env = os.environ if env is None else env
    kind = env.get(ENV_CLIENT, "mock").lower()
    if kind == "mock":
        return MockClient(env.get(ENV_FIXTURES) or DEFAULT_FIXTURES)
    if kind == "echo":
        return EchoClient()
    if kind == "live":
        endpoint = env.get(ENV_ENDPOINT)
        if not endpoint:
            raise ValueError(f"{ENV_CLIENT}=live needs {ENV_ENDPOINT}")
        return HttpClient(endpoint, env.get(ENV_KEY, ""), env.get(ENV_MODEL, "gpt-4o"))
    raise ValueError(f"unknown {ENV_CLIENT} value {kind!r}; expected mock, echo or live")
