"""Appearance-rich prompting: condition image + prompt -> enriched prompt."""
from .client import (
    EchoClient,
    FixtureMissing,
    HttpClient,
    LlmClient,
    LlmError,
    MockClient,
    client_from_env,
    content_hash,
)
from .pipeline import EnrichResult, enrich, run_enrich, stage1_extract, stage2_align, stage3_rewrite
from .semantic import ObjectView, SemanticDict, loads_lenient, parse_semantic_dict
from .templates import PINNED_SHA256, STAGES, TemplateChecksumError, render, template

__all__ = [
    "EchoClient", "EnrichResult", "FixtureMissing", "HttpClient", "LlmClient", "LlmError", "MockClient",
    "ObjectView", "PINNED_SHA256", "STAGES", "SemanticDict", "TemplateChecksumError", "client_from_env",
    "content_hash", "enrich", "loads_lenient", "parse_semantic_dict", "render", "run_enrich",
    "stage1_extract", "stage2_align", "stage3_rewrite", "template",
]
