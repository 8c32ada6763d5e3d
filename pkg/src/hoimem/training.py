"""Fine-tuning: focal loss over suppressed pair scores, adapters + memory keys trainable.

The frozen set (encoder weights, label matrices, semantic classifier) never
receives updates; the trainable set is every adapter parameter plus the two
visual key matrices.  All shuffling derives from the run seed, and batch
reduction follows image-id order, so training is bitwise reproducible.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hoimem import numkernel as nk
from hoimem.config import RunConfig
from hoimem.encoder import (AdapterBlock, adapter_param_set, encode,
                            featurize_priors, init_adapter_blocks, init_encoder_weights,
                            prior_matrix, roi_align_rows)
from hoimem.errors import InputError
from hoimem.memory import ConceptMemory, MemoryBranch, normalize_rows
from hoimem.pairing import HumanObjectPair, box_iou, enumerate_pairs, filter_detections
from hoimem.storage import FeatureIndex, read_named_matrices, write_named_matrices
from hoimem.taxonomy import DatasetAnnotations, ImageAnnotation, Taxonomy

IOU_MATCH_THRESHOLD = 0.5
PROB_CLAMP = 1e-7


def assign_targets(pairs: list[HumanObjectPair], gt_pairs, taxonomy: Taxonomy) -> np.ndarray:
    """Multi-hot verb targets: a verb is on iff some ground-truth pair of the
    same object class overlaps both boxes at IoU >= 0.5."""
    targets = np.zeros((len(pairs), taxonomy.num_verbs), dtype=np.float32)
    for i, pair in enumerate(pairs):
        for gt in gt_pairs:
            if pair.object.class_id != gt.object_class:
                continue
            if (box_iou(pair.human.box, gt.human_box) >= IOU_MATCH_THRESHOLD
                    and box_iou(pair.object.box, gt.object_box) >= IOU_MATCH_THRESHOLD):
                for verb in gt.verb_set:
                    targets[i, verb] = 1.0
    return targets


def focal_loss(suppressed: np.ndarray, target: np.ndarray,
               alpha: float, gamma_f: float) -> float:
    """Mean focal term over all (pair, verb) entries; probabilities clamped."""
    s = np.asarray(suppressed, dtype=np.float64)
    if not np.isfinite(s).all():
        raise InputError("focal loss input contains non-finite scores")
    p = np.clip(s, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(target, dtype=np.float64)
    pos = -alpha * y * (1.0 - p) ** gamma_f * np.log(p)
    neg = -(1.0 - alpha) * (1.0 - y) * p ** gamma_f * np.log(1.0 - p)
    return float((pos + neg).mean())


def focal_loss_graph(tape: nk.Tape, probs: nk.Tensor, target: np.ndarray,
                     alpha: float, gamma_f: float) -> nk.Tensor:
    """Tape version of :func:`focal_loss` (same clamping, mean over entries)."""
    dtype = probs.data.dtype
    y = np.asarray(target, dtype=dtype)
    p = tape.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus_p = tape.affine(p, scale=-1.0, shift=1.0)
    pos = tape.mul(tape.mul(tape.power(one_minus_p, gamma_f), tape.log(p)),
                   nk.Tensor(-alpha * y))
    neg = tape.mul(tape.mul(tape.power(p, gamma_f), tape.log(one_minus_p)),
                   nk.Tensor(-(1.0 - alpha) * (1.0 - y)))
    return tape.mean(tape.add(pos, neg))


def semantic_matrix_for_class(memory: ConceptMemory, object_class: int | None) -> np.ndarray:
    """Per-verb semantic rows as seen by a pair of the given object class (A x d_e)."""
    if memory.semantic_rows == "verb":
        return memory.w_t
    if object_class is None:
        raise InputError("class-level semantic rows need the pair's object class")
    mat = np.zeros((memory.num_verbs, memory.embed_dim), dtype=memory.w_t.dtype)
    for h, (verb, obj) in enumerate(memory.hoi_classes):
        if obj == object_class:
            mat[verb] = memory.w_t[h]
    return mat


@dataclass
class TrainState:
    """Trainable parameters, frozen references and the per-epoch loss history."""

    adapters: list[AdapterBlock]
    keys_ic: nk.Tensor
    keys_ia: nk.Tensor
    trainable: nk.ParamSet
    encoder_weights: dict[str, nk.Tensor]
    memory: ConceptMemory
    config: RunConfig
    loss_history: list[float] = field(default_factory=list)
    epoch: int = 0


def hash_arrays(arrays: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(arrays):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arrays[name]).tobytes())
    return digest.hexdigest()


def frozen_fingerprint(state: TrainState) -> str:
    frozen = {name: t.data for name, t in state.encoder_weights.items()}
    frozen["memory.labels_ic"] = state.memory.ic.labels
    frozen["memory.labels_ia"] = state.memory.ia.labels
    frozen["memory.w_t"] = state.memory.w_t
    return hash_arrays(frozen)


class Trainer:
    """Owns one fine-tuning run: graph assembly, stepping, key renormalization."""

    def __init__(self, annotations: DatasetAnnotations, index: FeatureIndex,
                 memory: ConceptMemory, config: RunConfig, dtype=np.float32):
        if not annotations.images:
            raise InputError("fine-tuning needs a non-empty training set")
        self.annotations = annotations
        self.index = index
        self.memory = memory
        self.config = config
        self.dtype = dtype
        self.taxonomy = annotations.taxonomy

        weights = init_encoder_weights(config, seed=config.seed, dtype=dtype)
        adapters = init_adapter_blocks(config, seed=config.seed, dtype=dtype, trainable=True)
        keys_ic = nk.parameter(memory.ic.keys, dtype=dtype)
        keys_ia = nk.parameter(memory.ia.keys, dtype=dtype)
        trainable = adapter_param_set(adapters).merged(
            nk.ParamSet({"memory.keys_ic": keys_ic, "memory.keys_ia": keys_ia}))
        self.state = TrainState(adapters=adapters, keys_ic=keys_ic, keys_ia=keys_ia,
                                trainable=trainable, encoder_weights=weights,
                                memory=memory, config=config)

        self.labels = nk.Tensor(memory.ic.labels.astype(dtype))
        self._semantic_cache: dict[int | None, nk.Tensor] = {}
        self._class_embeddings: dict[int, np.ndarray] = {}
        self._prepared: dict[int, tuple] = {}

    # --- static per-image preparation ------------------------------------

    def _class_embedding(self, class_id: int) -> np.ndarray:
        emb = self._class_embeddings.get(class_id)
        if emb is None:
            emb = self.index.semantic_object(class_id)
            self._class_embeddings[class_id] = emb
        return emb

    def _semantic_map(self, object_class: int | None) -> nk.Tensor:
        key = object_class if self.memory.semantic_rows == "hoi" else None
        cached = self._semantic_cache.get(key)
        if cached is None:
            mat = semantic_matrix_for_class(self.memory, object_class)
            cached = nk.Tensor(mat.T.astype(self.dtype))  # d_e x A
            self._semantic_cache[key] = cached
        return cached

    def _prepare_image(self, img: ImageAnnotation):
        """Pairs, targets, priors and suppression factors; None when no candidate."""
        cached = self._prepared.get(img.image_id)
        if cached is not None:
            return cached
        kept = filter_detections(list(img.detections), self.config)
        pairs = enumerate_pairs(kept, self.taxonomy, img.image_id)
        if pairs:
            ranked = sorted(range(len(pairs)),
                            key=lambda i: (-pairs[i].score_product, i))
            pairs = [pairs[i] for i in ranked[: self.config.max_pairs_per_image]]
        if not pairs:
            self._prepared[img.image_id] = None
            return None
        targets = assign_targets(pairs, img.gt_pairs, self.taxonomy)
        embeddings = {d.class_id: self._class_embedding(d.class_id) for d in kept}
        priors = prior_matrix(
            featurize_priors(kept, img.width, img.height, embeddings),
            self.config.embed_dim, dtype=self.dtype)
        factors = np.array([p.score_product for p in pairs], dtype=np.float64)
        factors = (factors ** self.config.lambda_train).astype(self.dtype)
        grid = self.index.image_grid(img.image_id, self.config.channels,
                                     self.config.image_size, self.config.image_size)
        prepared = (pairs, targets, priors, factors, grid)
        self._prepared[img.image_id] = prepared
        return prepared

    # --- graph assembly ---------------------------------------------------

    def image_loss(self, tape: nk.Tape, img: ImageAnnotation) -> nk.Tensor | None:
        prepared = self._prepare_image(img)
        if prepared is None:
            return None
        pairs, targets, priors, factors, grid = prepared
        enc = encode(tape, grid, priors, self.state.encoder_weights,
                     self.state.adapters, self.config)

        n = len(pairs)
        boxes = ([p.human.box for p in pairs] + [p.object.box for p in pairs]
                 + [p.union for p in pairs])
        rows = roi_align_rows(tape, enc, boxes, self.config)
        f_h = tape.narrow(rows, 0, 0, n)
        f_o = tape.narrow(rows, 0, n, n)
        f_u = tape.narrow(rows, 0, 2 * n, n)
        q_ic = tape.l2_normalize(tape.concat([f_h, f_o], axis=-1))

        g_ic, g_ia, g_t = self.memory.gammas
        vis_ic = tape.matmul(tape.matmul(q_ic, tape.transpose(self.state.keys_ic)), self.labels)
        vis_ia = tape.matmul(tape.matmul(f_u, tape.transpose(self.state.keys_ia)), self.labels)
        raw = tape.add(tape.scale(vis_ic, g_ic), tape.scale(vis_ia, g_ia))
        if self.memory.semantic_rows == "verb":
            sem = tape.matmul(f_u, self._semantic_map(None))
        else:
            sem_rows = [tape.matmul(tape.narrow(f_u, 0, i, 1),
                                    self._semantic_map(pair.object.class_id))
                        for i, pair in enumerate(pairs)]
            sem = tape.concat(sem_rows, axis=0)
        raw = tape.add(raw, tape.scale(sem, g_t))

        factor_grid = np.repeat(factors[:, None], self.taxonomy.num_verbs, axis=1)
        probs = tape.mul(tape.sigmoid(raw), nk.Tensor(factor_grid))
        return focal_loss_graph(tape, probs, targets,
                                self.config.focal_alpha, self.config.focal_gamma)

    def batch_loss(self, tape: nk.Tape, images: list[ImageAnnotation]) -> nk.Tensor | None:
        losses = []
        for img in sorted(images, key=lambda im: im.image_id):
            loss = self.image_loss(tape, img)
            if loss is not None:
                losses.append(loss)
        if not losses:
            return None
        total = losses[0]
        for loss in losses[1:]:
            total = tape.add(total, loss)
        return tape.scale(total, 1.0 / len(losses))

    # --- optimization loop --------------------------------------------------

    def _renormalize_keys(self) -> None:
        self.state.keys_ic.data = normalize_rows(self.state.keys_ic.data)
        self.state.keys_ia.data = normalize_rows(self.state.keys_ia.data)

    def run(self) -> TrainState:
        cfg = self.config
        images = sorted(self.annotations.images, key=lambda im: im.image_id)
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5e9, epoch]))
            order = rng.permutation(len(images))
            epoch_losses: list[float] = []
            for b in range(0, len(order), cfg.batch_size):
                batch = [images[i] for i in order[b: b + cfg.batch_size]]
                tape = nk.Tape()
                loss = self.batch_loss(tape, batch)
                if loss is None:
                    continue
                value = loss.item()
                if not math.isfinite(value):
                    raise RuntimeError(
                        f"loss diverged at epoch {epoch}, batch {b // cfg.batch_size}")
                tape.backward(loss)
                nk.adamw_step(self.state.trainable, lr=cfg.lr, betas=cfg.betas,
                              eps=cfg.eps, weight_decay=cfg.weight_decay)
                if cfg.normalize_keys:
                    self._renormalize_keys()
                self.state.trainable.zero_grad()
                epoch_losses.append(value)
            self.state.epoch = epoch + 1
            self.state.loss_history.append(
                float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        return self.state


def finetune(annotations: DatasetAnnotations, index: FeatureIndex, memory: ConceptMemory,
             config: RunConfig, dtype=np.float32) -> TrainState:
    """Train adapters and memory keys; the memory object itself is left untouched."""
    return Trainer(annotations, index, memory, config, dtype=dtype).run()


def tuned_memory(state: TrainState) -> ConceptMemory:
    """The training-free memory with its visual keys replaced by the trained ones."""
    memory = state.memory
    tuned = ConceptMemory(
        ic=MemoryBranch(state.keys_ic.data.astype(np.float32),
                        memory.ic.labels, list(memory.ic.provenance)),
        ia=MemoryBranch(state.keys_ia.data.astype(np.float32),
                        memory.ia.labels, list(memory.ia.provenance)),
        w_t=memory.w_t,
        gammas=memory.gammas,
        shots=memory.shots,
        semantic_rows=memory.semantic_rows,
        temperature=memory.temperature,
        hoi_classes=memory.hoi_classes,
    )
    return tuned.validate()


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Matrix sections for every trainable parameter plus a name/config manifest."""
    named = {name: t.data for name, t in state.trainable.params.items()}
    write_named_matrices(named, path, extra_meta={
        "kind": "checkpoint",
        "config": state.config.to_dict(),
        "loss_history": state.loss_history,
        "epochs_trained": state.epoch,
    })


def load_checkpoint(path: str | Path, dtype=np.float32):
    """Rebuild adapters and trained keys; returns (adapters, keys_ic, keys_ia, config, meta)."""
    named, meta = read_named_matrices(path)
    try:
        config = RunConfig.from_dict(meta["config"])
    except KeyError as exc:
        raise InputError(f"{path}: checkpoint manifest lacks a config snapshot") from exc
    adapters = init_adapter_blocks(config, seed=config.seed, dtype=dtype, trainable=False)
    for i, block in enumerate(adapters):
        for field_name in ("w_down", "prior_w1", "prior_b1", "prior_w2", "prior_b2",
                           "wq", "wk", "wv", "wo", "w_up"):
            key = f"adapter{i}.{field_name}"
            if key not in named:
                raise InputError(f"{path}: checkpoint lacks parameter {key}")
            target = getattr(block, field_name)
            arr = np.asarray(named[key], dtype=dtype).reshape(target.data.shape)
            target.data = arr
    for key in ("memory.keys_ic", "memory.keys_ia"):
        if key not in named:
            raise InputError(f"{path}: checkpoint lacks parameter {key}")
    keys_ic = np.asarray(named["memory.keys_ic"], dtype=np.float32)
    keys_ia = np.asarray(named["memory.keys_ia"], dtype=np.float32)
    return adapters, keys_ic, keys_ia, config, meta
