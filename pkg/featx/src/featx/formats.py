"""Writers for the scoring pipeline's on-disk interfaces.

The binary feature store is ``ACFB`` version 1: magic, u8 version, u32-LE
record count, u32-LE dim, then per record a u64-LE id followed by dim
float32-LE values, with a JSON manifest as a sibling file.  Annotations are
a JSON document with top-level ``taxonomy`` and ``images`` keys.  Record
ids hash (image_id, role, box), so re-exporting the same folder yields
identical ids.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from featx.errors import FeatxError

MAGIC = b"ACFB"
VERSION = 1
_HEADER = struct.Struct("<4sBII")
_RECORD_ID = struct.Struct("<Q")


def record_id(*parts) -> int:
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(),
                          "little")


def box_key(box) -> list[float]:
    return [round(float(v), 6) for v in box]


def write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
        fh.write("\n")


class FeatureWriter:
    """Collects fixed-width vectors plus manifest rows, then writes both files."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise FeatxError(f"feature dim must be positive, got {dim}")
        self.dim = dim
        self.records: dict[int, np.ndarray] = {}
        self.manifest: dict[int, dict] = {}

    def add(self, rid: int, vector: np.ndarray, meta: dict) -> None:
        vector = np.asarray(vector, dtype=np.float32).reshape(-1)
        if vector.shape != (self.dim,):
            raise FeatxError(
                f"vector for record {rid} has dim {vector.shape[0]}, expected {self.dim}")
        if rid in self.records:
            return  # same (image, role, box) crop requested twice
        self.records[rid] = vector
        self.manifest[rid] = meta

    def write(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ordered = sorted(self.records)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, len(ordered), self.dim))
            for rid in ordered:
                fh.write(_RECORD_ID.pack(rid))
                fh.write(self.records[rid].astype("<f4").tobytes())
        manifest = path.with_suffix(".manifest.json") if path.suffix else (
            path.parent / (path.name + ".manifest.json"))
        write_json({"dim": self.dim,
                    "records": {str(rid): self.manifest[rid] for rid in ordered}},
                   manifest)


def write_annotations(taxonomy: dict, images: list[dict], path: Path) -> None:
    write_json({"taxonomy": taxonomy, "images": images}, Path(path))


def load_taxonomy_doc(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise FeatxError(f"cannot read taxonomy {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FeatxError(f"taxonomy {path} is not valid JSON: {exc}") from exc
    if isinstance(data, dict) and "taxonomy" in data:
        data = data["taxonomy"]
    for key in ("verbs", "objects", "hoi_classes", "human_class"):
        if key not in data:
            raise FeatxError(f"taxonomy {path} lacks the '{key}' field")
    return data
