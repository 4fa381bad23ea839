"""Weights file: versioned header, JSON manifest, then raw little-endian arrays.

Layout::

    magic   8 bytes   b"SPCTLW\\x00\\x01"
    version u32 LE
    length  u32 LE    manifest byte length
    manifest          UTF-8 JSON {"model": {...}, "arrays": [{name, dtype, shape, offset, nbytes}], "meta": {...}}
    payload           concatenated array bytes, offsets relative to payload start
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"SPCTLW\x00\x01"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


@dataclass
class DenoiserWeights:
    model: dict[str, Any]
    arrays: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f4")
            raw = arr.tobytes()
            entries.append(
                {"name": name, "dtype": "<f4", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            )
            chunks.append(raw)
            offset += len(raw)
        manifest = json.dumps(
            {"model": self.model, "arrays": entries, "meta": self.meta}, sort_keys=True
        ).encode("utf-8")
        header = MAGIC + struct.pack("<II", VERSION, len(manifest))
        return header + manifest + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DenoiserWeights":
        if blob[: len(MAGIC)] != MAGIC:
            raise WeightsFormatError("not a weights file (bad magic)")
        version, length = struct.unpack_from("<II", blob, len(MAGIC))
        if version != VERSION:
            raise WeightsFormatError(f"unsupported weights version {version}")
        start = len(MAGIC) + 8
        manifest = json.loads(blob[start : start + length].decode("utf-8"))
        payload = memoryview(blob)[start + length :]
        arrays = {}
        for e in manifest["arrays"]:
            raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise WeightsFormatError(f"truncated array {e['name']!r}")
            arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        return cls(manifest["model"], arrays, manifest.get("meta", {}))

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: Path) -> "DenoiserWeights":
        return cls.from_bytes(Path(path).read_bytes())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f4").tobytes())
        return h.hexdigest()
