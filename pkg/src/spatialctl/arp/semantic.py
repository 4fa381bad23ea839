"""The object -> {visible part, shooting angle} dictionary and its lenient parser."""
from __future__ import annotations

import ast
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

log = logging.getLogger(__name__)

_FENCE = re.compile(r"^\s*```[a-zA-Z0-9_-]*\s*\n?(.*?)\n?\s*```\s*$", re.S)
_TRAILING_COMMA = re.compile(r",(\s*[}\]])")
_QUOTES = str.maketrans({"“": '"', "”": '"', "‘": "'", "’": "'"})


@dataclass(frozen=True)
class ObjectView:
    visible_part: str
    shooting_angle: str

    def to_json(self) -> dict[str, str]:
        return {"visible part": self.visible_part, "shooting angle": self.shooting_angle}


@dataclass(frozen=True)
class SemanticDict:
    entries: dict[str, ObjectView] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> ObjectView:
        return self.entries[name]

    def to_json(self) -> str:
        return json.dumps({k: v.to_json() for k, v in self.entries.items()}, ensure_ascii=False)

    @classmethod
    def from_mapping(cls, obj: Mapping[str, Any]) -> "SemanticDict":
        if not isinstance(obj, Mapping):
            raise ValueError(f"expected a dictionary, got {type(obj).__name__}")
        entries = {}
        for name, value in obj.items():
            if not isinstance(name, str) or not name.strip():
                raise ValueError(f"object names must be nonempty strings, got {name!r}")
            if not isinstance(value, Mapping):
                raise ValueError(f"value for {name!r} is not a dictionary")
            fields = {_field_key(k): v for k, v in value.items()}
            part, angle = fields.get("visible_part"), fields.get("shooting_angle")
            if not (isinstance(part, str) and part.strip() and isinstance(angle, str) and angle.strip()):
                raise ValueError(f"entry {name!r} needs nonempty 'visible part' and 'shooting angle'")
            entries[name.strip()] = ObjectView(part.strip(), angle.strip())
        return cls(entries)


def _field_key(key: Any) -> str:
    # tolerate "visiblepart", "visible_part", "Visible Part"
    k = re.sub(r"[\s_-]+", "", str(key).lower())
    return {"visiblepart": "visible_part", "shootingangle": "shooting_angle"}.get(k, k)


def strip_fences(text: str) -> str:
    m = _FENCE.match(text)
    return m.group(1) if m else text.strip()


def loads_lenient(text: str) -> Any:
    body = _TRAILING_COMMA.sub(r"\1", strip_fences(text).translate(_QUOTES)).strip()
    try:
        return json.loads(body)
    except json.JSONDecodeError:
        return ast.literal_eval(body)


def parse_semantic_dict(reply: str) -> SemanticDict:
    """Parse an LLM reply; anything unusable becomes an empty dictionary."""
    try:
        return SemanticDict.from_mapping(loads_lenient(reply))
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError) as exc:
        log.warning("unparseable dictionary reply (%s); using empty dictionary", exc)
        return SemanticDict()
