"""Key-value concept memory: balanced construction, retrieval scoring, suppression.

Three branches fuse at score time: an instance-centric branch keyed by
concatenated human+object features, an interaction-aware branch keyed by
union-region features, and a semantic classifier built from text-side
embeddings.  Visual keys are cached ground-truth features capped at a fixed
number of samples per interaction class so the long tail stays represented.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hoimem.config import RunConfig
from hoimem.errors import InputError
from hoimem.pairing import union_box
from hoimem.storage import (ACMB_MAGIC, FORMAT_VERSION, FeatureIndex, manifest_path,
                            pack_matrix, unpack_matrix)
from hoimem.taxonomy import DatasetAnnotations, read_json, write_json


@dataclass
class MemoryBranch:
    """Keys (one row per cached pair) and their multi-hot verb labels."""

    keys: np.ndarray    # M x D, float32, rows unit-norm (or zero)
    labels: np.ndarray  # M x A, float32 multi-hot
    provenance: list[tuple[int, int, tuple[int, ...]]] = field(default_factory=list)
    # provenance rows: (image_id, gt pair index, hoi classes this row was budgeted for)

    @property
    def rows(self) -> int:
        return self.keys.shape[0]

    def validate(self) -> "MemoryBranch":
        if self.keys.shape[0] != self.labels.shape[0]:
            raise InputError(
                f"branch has {self.keys.shape[0]} keys but {self.labels.shape[0]} label rows")
        if self.provenance and len(self.provenance) != self.keys.shape[0]:
            raise InputError("provenance length does not match key rows")
        if self.rows and not (self.labels.sum(axis=1) >= 1).all():
            raise InputError("every cached row needs at least one verb label")
        return self


@dataclass
class ConceptMemory:
    ic: MemoryBranch
    ia: MemoryBranch
    w_t: np.ndarray  # semantic classifier rows (unit-norm), verb- or class-indexed
    gammas: tuple[float, float, float]
    shots: int
    semantic_rows: str = "verb"
    temperature: float | None = None
    hoi_classes: tuple[tuple[int, int], ...] = ()

    @property
    def num_verbs(self) -> int:
        return self.ic.labels.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.ia.keys.shape[1]

    def validate(self) -> "ConceptMemory":
        self.ic.validate()
        self.ia.validate()
        d = self.embed_dim
        if self.ic.keys.shape[1] != 2 * d:
            raise InputError(
                f"instance-centric keys are {self.ic.keys.shape[1]}-wide, expected {2 * d}")
        if self.w_t.shape[1] != d:
            raise InputError(f"semantic rows are {self.w_t.shape[1]}-wide, expected {d}")
        if self.ic.labels.shape[1] != self.ia.labels.shape[1]:
            raise InputError("branch label widths disagree")
        if self.semantic_rows == "verb" and self.w_t.shape[0] != self.num_verbs:
            raise InputError(
                f"verb-level semantic classifier has {self.w_t.shape[0]} rows "
                f"for {self.num_verbs} verbs")
        if self.semantic_rows == "hoi" and self.w_t.shape[0] != len(self.hoi_classes):
            raise InputError("class-level semantic classifier row count mismatch")
        return self

    def equals(self, other: "ConceptMemory") -> bool:
        return (np.array_equal(self.ic.keys, other.ic.keys)
                and np.array_equal(self.ic.labels, other.ic.labels)
                and np.array_equal(self.ia.keys, other.ia.keys)
                and np.array_equal(self.ia.labels, other.ia.labels)
                and np.array_equal(self.w_t, other.w_t)
                and self.gammas == other.gammas
                and self.shots == other.shots
                and self.semantic_rows == other.semantic_rows
                and self.temperature == other.temperature
                and self.hoi_classes == other.hoi_classes
                and self.ic.provenance == other.ic.provenance)


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    """Unit-normalize rows; all-zero rows are left at zero."""
    mat = np.asarray(mat)
    norms = np.linalg.norm(mat, axis=-1, keepdims=True)
    return np.divide(mat, norms, out=np.zeros_like(mat), where=norms != 0.0)


def build_memory(annotations: DatasetAnnotations, index: FeatureIndex,
                 config: RunConfig) -> ConceptMemory:
    """Cache up to ``memory_shots`` ground-truth pairs per interaction class.

    Pairs are visited in ascending (image_id, pair order); a pair whose
    classes all have exhausted budgets is skipped.  Multi-verb pairs are
    stored once with their full multi-hot label and charge every matching
    class budget.  Held-out classes never contribute visual rows but keep
    their semantic classifier rows, so they stay scoreable via text.
    """
    taxonomy = annotations.taxonomy
    num_verbs = taxonomy.num_verbs
    shots = config.memory_shots

    visit = []
    for img in sorted(annotations.images, key=lambda im: im.image_id):
        for k, gt in enumerate(img.gt_pairs):
            visit.append((img, k, gt))
    if config.memory_sampling == "uniform":
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x6d656d]))
        visit = [visit[i] for i in rng.permutation(len(visit))]

    budget = [0] * taxonomy.num_hoi
    ic_keys, ia_keys, label_rows, provenance = [], [], [], []
    for img, k, gt in visit:
        eligible = []
        for verb in gt.verb_set:
            hoi = taxonomy.hoi_index(verb, gt.object_class)
            if hoi is not None and not taxonomy.heldout_flags[hoi]:
                eligible.append((verb, hoi))
        contributed = tuple(hoi for _, hoi in eligible if budget[hoi] < shots)
        if not contributed:
            continue
        for hoi in contributed:
            budget[hoi] += 1

        try:
            f_h = index.box_feature(img.image_id, "human", gt.human_box)
            f_o = index.box_feature(img.image_id, "object", gt.object_box)
            f_u = index.box_feature(img.image_id, "union", union_box(gt.human_box, gt.object_box))
        except InputError as exc:
            raise InputError(
                f"memory build: gt pair {k} of image {img.image_id}: {exc}") from exc

        label = np.zeros(num_verbs, dtype=np.float32)
        for verb, _ in eligible:
            label[verb] = 1.0
        ic_keys.append(np.concatenate([f_h, f_o]))
        ia_keys.append(np.array(f_u, dtype=np.float32))
        label_rows.append(label)
        provenance.append((img.image_id, k, contributed))

    if not ic_keys:
        raise InputError("memory build: no hoi class has any cached sample")

    ic = np.stack(ic_keys).astype(np.float32)
    ia = np.stack(ia_keys).astype(np.float32)
    if config.normalize_keys:
        ic = normalize_rows(ic)
        ia = normalize_rows(ia)
    labels = np.stack(label_rows).astype(np.float32)

    if config.semantic_rows == "verb":
        w_t = np.stack([index.semantic_verb(a) for a in range(num_verbs)])
    else:
        w_t = np.stack([index.semantic_hoi(h) for h in range(taxonomy.num_hoi)])
    w_t = normalize_rows(w_t.astype(np.float32))

    memory = ConceptMemory(
        ic=MemoryBranch(ic, labels, provenance),
        ia=MemoryBranch(ia, labels.copy(), list(provenance)),
        w_t=w_t,
        gammas=config.gammas,
        shots=shots,
        semantic_rows=config.semantic_rows,
        temperature=config.temperature,
        hoi_classes=taxonomy.hoi_classes,
    )
    return memory.validate()


def _normalize_query(q: np.ndarray, dim: int, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape != (dim,):
        raise InputError(f"{name} query has dim {q.shape[0]}, memory expects {dim}")
    norm = np.linalg.norm(q)
    return q / norm if norm > 0.0 else q


def _affinity(query: np.ndarray, keys: np.ndarray, temperature: float | None) -> np.ndarray:
    aff = keys.astype(np.float64) @ query
    if temperature is not None:
        aff = np.exp(-temperature * (1.0 - aff))
    return aff


def score_pair(memory: ConceptMemory, f_ic: np.ndarray, f_ia: np.ndarray,
               f_u: np.ndarray, object_class: int | None = None) -> np.ndarray:
    """Fused raw verb scores: weighted visual retrieval plus the semantic classifier.

    Queries are unit-normalized internally, so retrieval is scale invariant.
    With class-level semantic rows the pair's detected object class selects
    which classifier row backs each verb.
    """
    d = memory.embed_dim
    g_ic, g_ia, g_t = memory.gammas
    q_ic = _normalize_query(f_ic, 2 * d, "instance-centric")
    q_ia = _normalize_query(f_ia, d, "interaction-aware")
    q_u = _normalize_query(f_u, d, "union")

    scores = np.zeros(memory.num_verbs, dtype=np.float64)
    if memory.ic.rows:
        scores += g_ic * (_affinity(q_ic, memory.ic.keys, memory.temperature)
                          @ memory.ic.labels.astype(np.float64))
        scores += g_ia * (_affinity(q_ia, memory.ia.keys, memory.temperature)
                          @ memory.ia.labels.astype(np.float64))

    if memory.semantic_rows == "verb":
        scores += g_t * (memory.w_t.astype(np.float64) @ q_u)
    else:
        if object_class is None:
            raise InputError("class-level semantic rows need the pair's object class")
        for h, (verb, obj) in enumerate(memory.hoi_classes):
            if obj == object_class:
                scores[verb] += g_t * float(memory.w_t[h].astype(np.float64) @ q_u)
    return scores


def suppress(raw: np.ndarray, s_h: float, s_o: float, lam: float) -> np.ndarray:
    """Sigmoid of the raw scores, damped by the detector confidence product."""
    if not 0.0 <= s_h <= 1.0 or not 0.0 <= s_o <= 1.0:
        raise InputError(f"detector scores must lie in [0,1], got {s_h}, {s_o}")
    if lam < 0.0:
        raise InputError(f"suppression exponent must be >= 0, got {lam}")
    raw = np.asarray(raw, dtype=np.float64)
    return (s_h * s_o) ** lam / (1.0 + np.exp(-raw))


def add_semantic_class(memory: ConceptMemory, verb_embedding: np.ndarray) -> ConceptMemory:
    """Extend the verb vocabulary with a text-only class.

    The classifier gains one normalized row; the visual branches keep their
    keys and get a zero column appended to the label matrices.
    """
    if memory.semantic_rows != "verb":
        raise InputError("semantic extension is only defined for verb-level classifier rows")
    emb = np.asarray(verb_embedding, dtype=np.float32).reshape(-1)
    if emb.shape != (memory.embed_dim,):
        raise InputError(
            f"new semantic row has dim {emb.shape[0]}, memory expects {memory.embed_dim}")
    row = normalize_rows(emb[None, :])
    pad = np.zeros((memory.ic.rows, 1), dtype=np.float32)
    extended = ConceptMemory(
        ic=MemoryBranch(memory.ic.keys, np.hstack([memory.ic.labels, pad]),
                        list(memory.ic.provenance)),
        ia=MemoryBranch(memory.ia.keys, np.hstack([memory.ia.labels, pad.copy()]),
                        list(memory.ia.provenance)),
        w_t=np.vstack([memory.w_t, row]),
        gammas=memory.gammas,
        shots=memory.shots,
        semantic_rows=memory.semantic_rows,
        temperature=memory.temperature,
        hoi_classes=memory.hoi_classes,
    )
    return extended.validate()


# --- serialization ----------------------------------------------------------


def write_memory(memory: ConceptMemory, path: str | Path) -> None:
    """Three binary sections (instance, interaction, semantic) plus a JSON sidecar."""
    memory.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(ACMB_MAGIC)
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(pack_matrix(memory.ic.keys))
        fh.write(pack_matrix(memory.ic.labels))
        fh.write(pack_matrix(memory.ia.keys))
        fh.write(pack_matrix(memory.ia.labels))
        fh.write(pack_matrix(memory.w_t))
    write_json({
        "gammas": list(memory.gammas),
        "shots": memory.shots,
        "semantic_rows": memory.semantic_rows,
        "temperature": memory.temperature,
        "hoi_classes": [list(p) for p in memory.hoi_classes],
        "provenance": [[img, k, list(contrib)] for img, k, contrib in memory.ic.provenance],
    }, manifest_path(path))


def read_memory(path: str | Path) -> ConceptMemory:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 5 or blob[:4] != ACMB_MAGIC:
        raise InputError(f"{path}: bad magic, expected {ACMB_MAGIC!r}")
    if blob[4] != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported version {blob[4]}")
    offset = 5
    ic_keys, offset = unpack_matrix(blob, offset)
    ic_labels, offset = unpack_matrix(blob, offset)
    ia_keys, offset = unpack_matrix(blob, offset)
    ia_labels, offset = unpack_matrix(blob, offset)
    w_t, offset = unpack_matrix(blob, offset)
    if offset != len(blob):
        raise InputError(f"{path}: {len(blob) - offset} trailing bytes")

    meta = read_json(manifest_path(path))
    try:
        provenance = [(int(img), int(k), tuple(int(c) for c in contrib))
                      for img, k, contrib in meta.get("provenance", [])]
        memory = ConceptMemory(
            ic=MemoryBranch(ic_keys, ic_labels, list(provenance)),
            ia=MemoryBranch(ia_keys, ia_labels, list(provenance)),
            w_t=w_t,
            gammas=tuple(float(g) for g in meta["gammas"]),
            shots=int(meta["shots"]),
            semantic_rows=meta.get("semantic_rows", "verb"),
            temperature=meta.get("temperature"),
            hoi_classes=tuple((int(v), int(o)) for v, o in meta.get("hoi_classes", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{manifest_path(path)}: malformed memory sidecar: {exc}") from exc
    return memory.validate()
