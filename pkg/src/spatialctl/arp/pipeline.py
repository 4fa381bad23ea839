"""The three-stage prompt enrichment pipeline."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from ..scheduler import LatentImage
from . import templates
from .client import LlmClient, LlmError
from .semantic import SemanticDict, parse_semantic_dict, strip_fences

log = logging.getLogger(__name__)


def _ask(client: LlmClient, stage: str, text: str, image: LatentImage | None = None) -> str | None:
    try:
        return client.send(text, image, stage=stage)
    except LlmError as exc:
        log.warning("%s: client failed (%s); applying fallback", stage, exc)
        return None


def stage1_extract(cond: LatentImage, client: LlmClient) -> SemanticDict:
    reply = _ask(client, "stage1", templates.render("stage1"), cond)
    return SemanticDict() if reply is None else parse_semantic_dict(reply)


def stage2_align(semantic: SemanticDict, prompt: str, client: LlmClient) -> SemanticDict:
    if not semantic:
        return SemanticDict()
    reply = _ask(client, "stage2", templates.render("stage2", semantic.to_json(), prompt))
    return SemanticDict() if reply is None else parse_semantic_dict(reply)


def _valid_sentence(reply: str) -> str | None:
    text = strip_fences(reply).strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1].strip()
    if not text or text[0] in "{[":
        return None
    return text


def stage3_rewrite(semantic: SemanticDict, prompt: str, client: LlmClient) -> str:
    if not semantic:
        return prompt
    reply = _ask(client, "stage3", templates.render("stage3", semantic.to_json(), prompt))
    text = None if reply is None else _valid_sentence(reply)
    if text is None:
        log.warning("stage3: unusable reply; keeping the input sentence")
        return prompt
    return text


@dataclass
class EnrichResult:
    prompt: str
    prompt_app: str
    extracted: SemanticDict = field(default_factory=SemanticDict)
    aligned: SemanticDict = field(default_factory=SemanticDict)

    def to_json(self) -> dict:
        return {
            "prompt": self.prompt,
            "prompt_app": self.prompt_app,
            "stage1": json.loads(self.extracted.to_json()),
            "stage2": json.loads(self.aligned.to_json()),
        }


def run_enrich(cond: LatentImage, prompt: str, client: LlmClient) -> EnrichResult:
    extracted = stage1_extract(cond, client)
    aligned = stage2_align(extracted, prompt, client)
    return EnrichResult(prompt, stage3_rewrite(aligned, prompt, client), extracted, aligned)


def enrich(cond: LatentImage, prompt: str, client: LlmClient) -> str:
    return run_enrich(cond, prompt, client).prompt_app
