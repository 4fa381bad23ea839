"""Run records: a directory holding images, ``record.json`` and ``steps.csv``."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..denoiser.dataset import save_png

RECORD_VERSION = 1
STEP_COLUMNS = ("phase", "event", "t", "t_prev", "injected", "appearance", "repeats")


@dataclass
class RunRecord:
    config: dict[str, Any]
    prompt: str
    prompt_app: str
    cache: dict[str, int]
    calls: int
    expected_calls: int
    steps: list[dict] = field(default_factory=list)
    images: dict[str, str] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    arp: dict | None = None
    condprep: dict | None = None
    condition_sha256: str | None = None
    weights_sha256: str | None = None
    restart_at: int | None = None
    wall_clock: dict[str, float] = field(default_factory=dict)
    version: int = RECORD_VERSION

    def to_dict(self, wall_clock: bool = True) -> dict[str, Any]:
        d = asdict(self)
        if not wall_clock:
            d.pop("wall_clock")
        return d

    def to_json(self, wall_clock: bool = True) -> str:
        return json.dumps(self.to_dict(wall_clock), indent=2, sort_keys=True)

    def steps_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, STEP_COLUMNS, lineterminator="\n", restval="")
        writer.writeheader()
        for row in self.steps:
            writer.writerow({k: row.get(k, "") for k in STEP_COLUMNS})
        return buf.getvalue()

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("metric", "value"))
        for k in sorted(self.metrics):
            writer.writerow((k, repr(float(self.metrics[k]))))
        return buf.getvalue()

    def save(self, root: Path, images: dict[str, np.ndarray]) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for name, img in sorted(images.items()):
            rel = f"{name}.png"
            save_png(root / rel, img)
            self.images[name] = rel
        (root / "steps.csv").write_text(self.steps_csv())
        (root / "metrics.csv").write_text(self.metrics_csv())
        (root / "record.json").write_text(self.to_json())
        return root / "record.json"

    @classmethod
    def load(cls, path: Path) -> "RunRecord":
        path = Path(path)
        if path.is_dir():
            path = path / "record.json"
        return cls(**json.loads(path.read_text()))
