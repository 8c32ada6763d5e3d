"""Bit-exact binary containers: feature stores, matrix sections, record ids.

All layouts are little-endian and fixed, so identical in-memory values
serialize to byte-identical files on every platform and run.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hoimem.errors import InputError
from hoimem.taxonomy import read_json, write_json

ACFB_MAGIC = b"ACFB"
ACMB_MAGIC = b"ACMB"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sBII")  # magic, version, record count, dim
_RECORD_ID = struct.Struct("<Q")
_MATRIX_HEADER = struct.Struct("<II")  # rows, cols

ROLES = ("human", "object", "union", "semantic", "image")


def derive_record_id(*parts) -> int:
    """Stable 64-bit id from a descriptor tuple (image id, role, box, ...)."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class FeatureStore:
    """Fixed-width float32 vectors keyed by 64-bit record id.

    The manifest describes what each record is: image id, role (human,
    object, union, semantic or image) and either a box, a verb/object
    index, or a grid shape.
    """

    dim: int
    records: dict[int, np.ndarray] = field(default_factory=dict)
    manifest: dict[int, dict] = field(default_factory=dict)

    def add(self, record_id: int, vector: np.ndarray, meta: dict) -> None:
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise InputError(
                f"record {record_id}: vector shape {vector.shape} != declared dim ({self.dim},)")
        if record_id in self.records:
            raise InputError(f"duplicate record id {record_id}")
        self.records[record_id] = vector
        self.manifest[record_id] = meta

    def validate(self) -> "FeatureStore":
        if self.dim <= 0:
            raise InputError(f"feature dim must be positive, got {self.dim}")
        if set(self.records) != set(self.manifest):
            missing = set(self.records) ^ set(self.manifest)
            raise InputError(f"manifest does not cover stored records exactly; differs on {sorted(missing)[:5]}")
        for rid, vec in self.records.items():
            if vec.shape != (self.dim,):
                raise InputError(f"record {rid}: dim {vec.shape} != store dim {self.dim}")
        return self


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    if path.suffix:
        return path.with_suffix(".manifest.json")
    return path.parent / (path.name + ".manifest.json")


def write_feature_store(store: FeatureStore, path: str | Path) -> None:
    """Binary records plus a sibling JSON manifest, both deterministic."""
    store.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(store.records)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ACFB_MAGIC, FORMAT_VERSION, len(ordered), store.dim))
        for rid in ordered:
            fh.write(_RECORD_ID.pack(rid))
            fh.write(store.records[rid].astype("<f4").tobytes())
    write_json(
        {"dim": store.dim,
         "records": {str(rid): store.manifest[rid] for rid in ordered}},
        manifest_path(path))


def read_feature_store(path: str | Path) -> FeatureStore:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise InputError(f"{path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(blob, 0)
    if magic != ACFB_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}, expected {ACFB_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    if dim <= 0:
        raise InputError(f"{path}: non-positive feature dim {dim}")
    record_size = _RECORD_ID.size + 4 * dim
    expected = _HEADER.size + count * record_size
    if len(blob) < expected:
        raise InputError(f"{path}: truncated payload ({len(blob)} bytes, expected {expected})")
    if len(blob) > expected:
        raise InputError(f"{path}: {len(blob) - expected} trailing bytes after {count} records")

    store = FeatureStore(dim=dim)
    offset = _HEADER.size
    records: dict[int, np.ndarray] = {}
    for _ in range(count):
        (rid,) = _RECORD_ID.unpack_from(blob, offset)
        offset += _RECORD_ID.size
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
        offset += 4 * dim
        if rid in records:
            raise InputError(f"{path}: duplicate record id {rid}")
        records[rid] = vec
    store.records = records

    mpath = manifest_path(path)
    if not mpath.exists():
        raise InputError(f"missing manifest {mpath}")
    manifest_doc = read_json(mpath)
    try:
        declared_dim = int(manifest_doc["dim"])
        entries = manifest_doc["records"]
        store.manifest = {int(rid): meta for rid, meta in entries.items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{mpath}: malformed manifest: {exc}") from exc
    if declared_dim != dim:
        raise InputError(f"{mpath}: manifest dim {declared_dim} != header dim {dim}")
    return store.validate()


def _box_key(box) -> tuple:
    return tuple(round(float(v), 6) for v in box)


class FeatureIndex:
    """Lookup from (image_id, role, box) or (role, index) descriptors to vectors."""

    def __init__(self, store: FeatureStore):
        self.store = store
        self._by_box: dict[tuple, int] = {}
        self._semantic_verb: dict[int, int] = {}
        self._semantic_object: dict[int, int] = {}
        self._semantic_hoi: dict[int, int] = {}
        self._images: dict[int, int] = {}
        for rid, meta in store.manifest.items():
            role = meta.get("role")
            if role in ("human", "object", "union"):
                self._by_box[(int(meta["image_id"]), role, _box_key(meta["box"]))] = rid
            elif role == "semantic":
                if "verb_index" in meta:
                    self._semantic_verb[int(meta["verb_index"])] = rid
                if "object_index" in meta:
                    self._semantic_object[int(meta["object_index"])] = rid
                if "hoi_index" in meta:
                    self._semantic_hoi[int(meta["hoi_index"])] = rid
            elif role == "image":
                self._images[int(meta["image_id"])] = rid

    @property
    def dim(self) -> int:
        return self.store.dim

    def box_feature(self, image_id: int, role: str, box) -> np.ndarray:
        rid = self._by_box.get((image_id, role, _box_key(box)))
        if rid is None and role in ("human", "object"):
            # person boxes may only be stored under the other visual role
            other = "object" if role == "human" else "human"
            rid = self._by_box.get((image_id, other, _box_key(box)))
        if rid is None:
            raise InputError(
                f"no '{role}' feature record for image {image_id} box {list(_box_key(box))}")
        return self.store.records[rid]

    def semantic_verb(self, verb: int) -> np.ndarray:
        rid = self._semantic_verb.get(verb)
        if rid is None:
            raise InputError(f"no semantic feature record for verb {verb}")
        return self.store.records[rid]

    def semantic_object(self, object_class: int) -> np.ndarray:
        rid = self._semantic_object.get(object_class)
        if rid is None:
            raise InputError(f"no semantic feature record for object class {object_class}")
        return self.store.records[rid]

    def semantic_hoi(self, hoi: int) -> np.ndarray:
        rid = self._semantic_hoi.get(hoi)
        if rid is None:
            raise InputError(f"no semantic feature record for hoi class {hoi}")
        return self.store.records[rid]

    def image_grid(self, image_id: int, channels: int, height: int, width: int) -> np.ndarray:
        rid = self._images.get(image_id)
        if rid is None:
            raise InputError(f"no image grid record for image {image_id}")
        vec = self.store.records[rid]
        if vec.size != channels * height * width:
            raise InputError(
                f"image {image_id}: grid record has {vec.size} values, "
                f"expected {channels}x{height}x{width}")
        return vec.reshape(channels, height, width)


def check_coverage(annotations, index: FeatureIndex, config) -> None:
    """Referential integrity: every record the pipeline will look up resolves.

    Checks ground-truth pair features and candidate-pair features for the
    filtering configured in ``config``.
    """
    from hoimem.pairing import enumerate_pairs, filter_detections, union_box

    for img in annotations.images:
        for k, g in enumerate(img.gt_pairs):
            index.box_feature(img.image_id, "human", g.human_box)
            index.box_feature(img.image_id, "object", g.object_box)
            index.box_feature(img.image_id, "union", union_box(g.human_box, g.object_box))
        kept = filter_detections(list(img.detections), config)
        for pair in enumerate_pairs(kept, annotations.taxonomy, img.image_id):
            index.box_feature(img.image_id, "human", pair.human.box)
            index.box_feature(img.image_id, "object", pair.object.box)
            index.box_feature(img.image_id, "union", pair.union)


# --- matrix sections (shared by memory files, checkpoints, weight files) ---


def pack_matrix(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise InputError(f"matrix sections are 2-D, got shape {arr.shape}")
    rows, cols = arr.shape
    return _MATRIX_HEADER.pack(rows, cols) + arr.astype("<f4").tobytes()


def unpack_matrix(blob: bytes, offset: int) -> tuple[np.ndarray, int]:
    if len(blob) < offset + _MATRIX_HEADER.size:
        raise InputError("truncated matrix header")
    rows, cols = _MATRIX_HEADER.unpack_from(blob, offset)
    offset += _MATRIX_HEADER.size
    n = rows * cols
    if len(blob) < offset + 4 * n:
        raise InputError("truncated matrix payload")
    arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).copy().reshape(rows, cols)
    return arr, offset + 4 * n


# --- named-parameter container (encoder weights, checkpoints) ---


def write_named_matrices(named: dict[str, np.ndarray], path: str | Path,
                         extra_meta: dict | None = None) -> None:
    """Concatenated single-record feature-store sections, one per parameter.

    Each section is a standard binary container whose only record id is the
    64-bit hash of the parameter name; a JSON sidecar maps names to hashes
    and original shapes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(named)
    meta: dict = {"parameters": {}}
    if extra_meta:
        meta.update(extra_meta)
    with open(path, "wb") as fh:
        for name in names:
            arr = np.asarray(named[name], dtype=np.float32)
            flat = arr.reshape(-1)
            rid = derive_record_id("param", name)
            fh.write(_HEADER.pack(ACFB_MAGIC, FORMAT_VERSION, 1, flat.size))
            fh.write(_RECORD_ID.pack(rid))
            fh.write(flat.astype("<f4").tobytes())
            meta["parameters"][name] = {"record_id": rid, "shape": list(arr.shape)}
    write_json(meta, manifest_path(path))


def read_named_matrices(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    meta = read_json(manifest_path(path))
    by_id: dict[int, np.ndarray] = {}
    offset = 0
    while offset < len(blob):
        if len(blob) < offset + _HEADER.size:
            raise InputError(f"{path}: truncated section header")
        magic, version, count, dim = _HEADER.unpack_from(blob, offset)
        if magic != ACFB_MAGIC or version != FORMAT_VERSION or count != 1 or dim <= 0:
            raise InputError(f"{path}: malformed parameter section at offset {offset}")
        offset += _HEADER.size
        (rid,) = _RECORD_ID.unpack_from(blob, offset)
        offset += _RECORD_ID.size
        if len(blob) < offset + 4 * dim:
            raise InputError(f"{path}: truncated parameter payload")
        by_id[rid] = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
        offset += 4 * dim
    named = {}
    try:
        for name, entry in meta["parameters"].items():
            rid = int(entry["record_id"])
            if rid not in by_id:
                raise InputError(f"{path}: parameter {name} (id {rid}) missing from payload")
            named[name] = by_id[rid].reshape(entry["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed parameter manifest: {exc}") from exc
    if len(named) != len(by_id):
        raise InputError(f"{path}: payload has sections not named in the manifest")
    return named, meta
