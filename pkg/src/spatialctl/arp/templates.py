"""Stage instruction templates, loaded from package resources and checksum-pinned."""
from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources

STAGES = ("stage1", "stage2", "stage3")
IMAGE_SLOT = "<ImageHere>"
DICT_SLOT = "<DictionaryHere>"
PROMPT_SLOT = "<PromptHere>"

PINNED_SHA256 = {
    "stage1": "28cd5e4f4177165d87296b908feaa9ece4f966af3751e6acaba50e604e78c8d6",
    "stage2": "7fddb1fbccf05f6f76931085abc9368b6122d99a66c0d661b727454cae661131",
    "stage3": "0c7a1474ed1f062be916cf1bb44e74638eb471a07f9d48e877fd4c42a61db79d",
}


class TemplateChecksumError(RuntimeError):
    pass


@lru_cache(maxsize=None)
def template_bytes(stage: str) -> bytes:
    if stage not in STAGES:
        raise KeyError(f"unknown stage {stage!r}")
    data = resources.files(__package__).joinpath("templates", f"{stage}.txt").read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    if digest != PINNED_SHA256[stage]:
        raise TemplateChecksumError(f"template {stage} checksum {digest} does not match pinned value")
    return data


def template(stage: str) -> str:
    return template_bytes(stage).decode("utf-8")


def render(stage: str, dictionary: str | None = None, prompt: str | None = None) -> str:
    text = template(stage)
    if dictionary is not None:
        text = text.replace(DICT_SLOT, dictionary)
    if prompt is not None:
        text = text.replace(PROMPT_SLOT, prompt)
    return text
