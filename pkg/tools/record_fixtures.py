"""Regenerate the ARP fixture replies from ``fixtures/cases.json``.

Draws the stand-in condition images (if missing) and writes one reply file
per case under ``<stage>/<content hash>.txt``.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

from PIL import Image, ImageDraw

from spatialctl.arp import MockClient, SemanticDict, render
from spatialctl.arp.client import DEFAULT_FIXTURES
from spatialctl.denoiser.dataset import load_png, to_latent


def _draw(name: str, size: int = 32) -> Image.Image:
    img = Image.new("L", (size, size), 0)
    d = ImageDraw.Draw(img)
    if name.startswith("bear"):
        d.ellipse((8, 10, 24, 26), outline=255)
        d.ellipse((6, 5, 12, 11), outline=255)
        d.ellipse((20, 5, 26, 11), outline=255)
        if name == "bear_fenced":
            d.point((16, 20), fill=255)
    elif name == "cow_farmhouse":
        d.polygon([(2, 20), (8, 12), (14, 20)], outline=255)
        d.rectangle((3, 20, 13, 29), outline=255)
        d.ellipse((17, 10, 29, 20), outline=255)
        d.line((20, 20, 24, 27), fill=255)
    else:
        d.rectangle((9, 9, 22, 22), outline=255)
    return img


def main(root: Path = DEFAULT_FIXTURES) -> int:
    cases = json.loads((root / "cases.json").read_text())["cases"]
    client = MockClient(root)
    for case in cases:
        stage = case["stage"]
        if stage == "stage1":
            path = root / case["image"]
            if not path.exists():
                path.parent.mkdir(parents=True, exist_ok=True)
                _draw(path.stem).save(path)
            image = to_latent(load_png(path))
            written = client.record(stage, render(stage), case["reply"], image)
        else:
            text = render(stage, SemanticDict.from_mapping(case["dictionary"]).to_json(), case["prompt"])
            written = client.record(stage, text, case["reply"])
        print(f"{case['name']:>26} -> {written.relative_to(root)}")
    return 0


if __name__ == "__main__":
    sys.exit(main(Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_FIXTURES))
