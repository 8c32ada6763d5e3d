"""Seeded synthetic worlds: ground truth, detections, features, painted images.

Every interaction class owns a unit prototype direction; cached keys,
queries and semantic rows are noisy copies of those prototypes, so
retrieval quality is controlled by the noise and separation knobs.  Class
frequencies follow a Zipf law over class rank (after one guaranteed sample
per class), detector boxes are jittered ground truth plus occasional
spurious boxes, and each pair's union region is painted with a
class-specific color so the encoder path can recover the class from
pixels.  A ``shift`` rotates the prototypes behind *test-time* stored
features, degrading training-free retrieval while the painted images stay
consistent, which is exactly the gap fine-tuning must close.

All randomness derives from the world seed with per-image substreams, so
bundles are byte-identical across runs and worker counts.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hoimem.errors import InputError
from hoimem.pairing import Detection, union_box
from hoimem.storage import FeatureStore, derive_record_id, write_feature_store
from hoimem.taxonomy import (DatasetAnnotations, GroundTruthPair, ImageAnnotation,
                             Taxonomy, read_json, save_annotations, write_json)

REJECTION_CAP = 10_000
TRAIN_ID_BASE = 1_000
TEST_ID_BASE = 20_000


@dataclass
class WorldSpec:
    name: str = "custom"
    verbs: int = 6
    objects: int = 7           # includes the person class
    hoi_count: int = 6
    feature_dim: int = 16
    zipf_exponent: float = 0.0
    separation: float = 1.45   # minimum pairwise prototype angle, radians
    feature_noise: float = 0.05
    semantic_noise: float = 0.0  # perturbation of the class-mean semantic rows
    box_jitter: float = 0.35   # px std on detection boxes
    score_noise: float = 0.02
    base_score: float = 0.9
    spurious_rate: float = 0.15  # expected spurious detections per image
    spurious_score: float = 0.5
    multi_verb_rate: float = 0.0
    min_pairs: int = 1
    max_pairs: int = 2
    train_images: int = 30
    test_images: int = 20
    shift_angle: float = 0.0   # rotation of test-time stored-feature prototypes
    image_size: int = 32
    channels: int = 3
    paint_noise: float = 0.03
    pattern_tile: int = 4  # class texture tile, matches the encoder patch size
    seed: int = 0

    def validate(self) -> "WorldSpec":
        if self.separation <= 0:
            raise InputError("prototype separation must be positive")
        for name in ("feature_noise", "box_jitter", "score_noise", "spurious_rate",
                     "paint_noise"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be >= 0")
        if self.hoi_count > self.verbs * (self.objects - 1):
            raise InputError("hoi_count exceeds available verb-object combinations")
        if self.hoi_count < 1 or self.verbs < 1 or self.objects < 2:
            raise InputError("world needs at least one verb, one non-person object, one class")
        if not 1 <= self.min_pairs <= self.max_pairs <= 4:
            raise InputError("pairs per image must satisfy 1 <= min <= max <= 4")
        if self.feature_dim % 2 != 0:
            raise InputError("feature_dim must be even (pairwise rotation planes)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WorldSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown world spec fields: {sorted(unknown)}")
        return cls(**data).validate()

    @classmethod
    def load(cls, path: str | Path) -> "WorldSpec":
        return cls.from_dict(read_json(path))


def profiles() -> dict[str, WorldSpec]:
    """Named presets: ``easy`` (separable), ``longtail`` (Zipf), ``shifted`` (domain gap)."""
    return {
        "easy": WorldSpec(
            name="easy", verbs=10, objects=11, hoi_count=10, zipf_exponent=0.0,
            score_noise=0.015, min_pairs=2, max_pairs=3,
            train_images=16, test_images=30, seed=7),
        "longtail": WorldSpec(
            name="longtail", verbs=8, objects=8, hoi_count=12, zipf_exponent=1.5,
            feature_noise=0.45, semantic_noise=0.5, score_noise=0.002,
            multi_verb_rate=0.1, train_images=20, test_images=60,
            separation=1.35, seed=11),
        "shifted": WorldSpec(
            name="shifted", verbs=6, objects=7, hoi_count=6, zipf_exponent=0.0,
            shift_angle=math.pi / 2, min_pairs=2, max_pairs=3,
            train_images=64, test_images=24, seed=13),
        "toy": WorldSpec(
            name="toy", verbs=4, objects=5, hoi_count=4, zipf_exponent=0.0,
            train_images=6, test_images=4, max_pairs=1, spurious_rate=0.0, seed=3),
    }


def get_profile(name: str) -> WorldSpec:
    try:
        return dataclasses.replace(profiles()[name])
    except KeyError:
        raise InputError(f"unknown profile {name!r}; choose from {sorted(profiles())}") from None


@dataclass
class SyntheticBundle:
    spec: WorldSpec
    train: DatasetAnnotations
    test: DatasetAnnotations
    store: FeatureStore   # crop + semantic features, dim = spec.feature_dim
    images: FeatureStore  # painted pixel grids, dim = channels * size * size
    frequencies: list[int]


# --- deterministic geometry helpers ------------------------------------------

_QUADRANTS = ((0, 0), (1, 0), (0, 1), (1, 1))


def _sample_prototypes(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit rows with pairwise angle >= separation via capped rejection sampling."""
    limit = math.cos(spec.separation)
    chosen: list[np.ndarray] = []
    for h in range(spec.hoi_count):
        best = -1.0
        for _ in range(REJECTION_CAP):
            candidate = rng.standard_normal(spec.feature_dim)
            candidate /= np.linalg.norm(candidate)
            worst = max((float(candidate @ c) for c in chosen), default=-1.0)
            if worst <= limit:
                chosen.append(candidate)
                break
            best = max(best, -worst)
        else:
            achievable = math.acos(max(min(-best, 1.0), -1.0))
            raise InputError(
                f"cannot place prototype {h + 1}/{spec.hoi_count} at separation "
                f">= {spec.separation:.3f} rad; best achievable this run was "
                f"{achievable:.3f} rad")
    return np.stack(chosen)


def _rotation(dim: int, angle: float) -> np.ndarray:
    """Block-diagonal plane rotation: every vector moves by exactly ``angle``."""
    rot = np.zeros((dim, dim))
    c, s = math.cos(angle), math.sin(angle)
    for i in range(0, dim, 2):
        rot[i, i] = c
        rot[i, i + 1] = -s
        rot[i + 1, i] = s
        rot[i + 1, i + 1] = c
    return rot


def _class_patterns(count: int, channels: int, tile: int,
                    rng: np.random.Generator) -> np.ndarray:
    """One high-contrast texture tile per class (count, C, tile, tile).

    Tiles are centered on the background level so the class signal lives in
    the pattern shape, not in a shared brightness offset.
    """
    return 0.1 + rng.uniform(-0.8, 0.8, size=(count, channels, tile, tile))


def _zipf_pmf(count: int, exponent: float) -> np.ndarray:
    weights = np.arange(1, count + 1, dtype=np.float64) ** (-exponent)
    return weights / weights.sum()


def _jitter_box(box, jitter: float, size: int, rng: np.random.Generator):
    x1, y1, x2, y2 = box
    dx1, dy1, dx2, dy2 = rng.normal(0.0, jitter, size=4) if jitter > 0 else (0, 0, 0, 0)
    x1 = min(max(x1 + dx1, 0.0), size - 2.0)
    y1 = min(max(y1 + dy1, 0.0), size - 2.0)
    x2 = min(max(x2 + dx2, x1 + 1.0), float(size))
    y2 = min(max(y2 + dy2, y1 + 1.0), float(size))
    return (round(x1, 4), round(y1, 4), round(x2, 4), round(y2, 4))


def _noisy_unit(base: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    vec = base + sigma * rng.standard_normal(base.shape) if sigma > 0 else base.copy()
    norm = np.linalg.norm(vec)
    return (vec / norm if norm > 0 else vec).astype(np.float32)


# --- generation ----------------------------------------------------------------


def _build_taxonomy(spec: WorldSpec) -> Taxonomy:
    verbs = tuple(f"verb{i:02d}" for i in range(spec.verbs))
    objects = tuple(f"object{i:02d}" for i in range(spec.objects - 1)) + ("person",)
    hoi = []
    for k in range(spec.hoi_count):
        verb = k % spec.verbs
        obj = (verb + k // spec.verbs) % (spec.objects - 1)
        hoi.append((verb, obj))
    return Taxonomy(verbs=verbs, objects=objects, hoi_classes=tuple(hoi),
                    human_class=spec.objects - 1).validate()


class _WorldState:
    """Shared prototype/semantic structure derived from the seed."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        self.taxonomy = _build_taxonomy(spec)
        self.prototypes = _sample_prototypes(
            spec, np.random.default_rng(np.random.SeedSequence([spec.seed, 1])))
        self.patterns = _class_patterns(
            spec.hoi_count, spec.channels, spec.pattern_tile,
            np.random.default_rng(np.random.SeedSequence([spec.seed, 2])))
        shift = _rotation(spec.feature_dim, spec.shift_angle)
        self.test_prototypes = self.prototypes @ shift.T

        rng_sem = np.random.default_rng(np.random.SeedSequence([spec.seed, 3]))
        tax = self.taxonomy
        self.verb_semantic = np.zeros((tax.num_verbs, spec.feature_dim), dtype=np.float32)
        for verb in range(tax.num_verbs):
            rows = [self.prototypes[h] for h, (v, _) in enumerate(tax.hoi_classes) if v == verb]
            base = np.mean(rows, axis=0) if rows else rng_sem.standard_normal(spec.feature_dim)
            self.verb_semantic[verb] = _noisy_unit(np.asarray(base), spec.semantic_noise, rng_sem)
        self.object_semantic = np.zeros((tax.num_objects, spec.feature_dim), dtype=np.float32)
        for obj in range(tax.num_objects):
            rows = [self.prototypes[h] for h, (_, o) in enumerate(tax.hoi_classes) if o == obj]
            base = (np.mean(rows, axis=0) if rows
                    else rng_sem.standard_normal(spec.feature_dim))
            self.object_semantic[obj] = _noisy_unit(np.asarray(base), spec.semantic_noise, rng_sem)

    def by_object(self, obj: int) -> list[int]:
        return [h for h, (_, o) in enumerate(self.taxonomy.hoi_classes) if o == obj]


def _class_plan(spec: WorldSpec, pair_counts: list[int],
                rng: np.random.Generator) -> list[list[int]]:
    """Classes per image: round-robin through every class once, then Zipf draws.

    Classes are distinct within one image so cross-slot candidate pairs are
    true negatives rather than same-class confusers.
    """
    pmf = _zipf_pmf(spec.hoi_count, spec.zipf_exponent)
    pending = list(range(spec.hoi_count))  # guarantees every class one sample
    plan = []
    for n in pair_counts:
        chosen: list[int] = []
        guard = 0
        while len(chosen) < n:
            guard += 1
            if guard > 1000:
                raise InputError("could not draw distinct classes for an image")
            if pending:
                c = pending.pop(0)
                if c in chosen:
                    pending.append(c)
                    continue
            else:
                c = int(rng.choice(spec.hoi_count, p=pmf))
                if c in chosen:
                    continue
            chosen.append(c)
        plan.append(chosen)
    return plan


def _slot_boxes(quadrant: tuple[int, int], half: int, tile: int,
                rng: np.random.Generator):
    """Human and object boxes side by side inside one quadrant.

    Corners snap to the texture-tile lattice so the painted content seen by
    any fixed patch grid is identical across images of the same class.
    """
    qx, qy = quadrant[0] * half, quadrant[1] * half
    height = 3 * tile
    ox = tile * int(rng.integers(0, max((half - 2 * tile) // tile, 0) + 1))
    oy = tile * int(rng.integers(0, max((half - height) // tile, 0) + 1))
    x0, y0 = qx + ox, qy + oy
    human = (float(x0), float(y0), float(x0 + tile), float(y0 + height))
    object_ = (float(x0 + tile), float(y0), float(x0 + 2 * tile), float(y0 + height))
    return human, object_


def _paint(image: np.ndarray, box, pattern: np.ndarray, rng: np.random.Generator,
           noise: float) -> None:
    """Fill the box with the class texture, tiled in image coordinates."""
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    tile = pattern.shape[-1]
    ys = np.arange(y1, y2) % tile
    xs = np.arange(x1, x2) % tile
    region = image[:, y1:y2, x1:x2]
    region[...] = pattern[:, ys[:, None], xs[None, :]]
    if noise > 0:
        region += noise * rng.standard_normal(region.shape)


def generate(spec: WorldSpec) -> SyntheticBundle:
    """Build annotations, feature records and painted grids for one world."""
    spec = spec.validate()
    world = _WorldState(spec)
    tax = world.taxonomy
    size, half = spec.image_size, spec.image_size // 2
    store = FeatureStore(dim=spec.feature_dim)
    images_store = FeatureStore(dim=spec.channels * size * size)

    def add_feature(image_id: int, role: str, box, vec: np.ndarray) -> None:
        key = tuple(round(float(v), 6) for v in box)
        rid = derive_record_id(image_id, role, key)
        if rid in store.records:
            return  # same crop requested twice (e.g. zero-jitter detections)
        store.add(rid, vec, {"image_id": image_id, "role": role, "box": list(key)})

    for verb in range(tax.num_verbs):
        store.add(derive_record_id("semantic", "verb", verb), world.verb_semantic[verb],
                  {"image_id": -1, "role": "semantic", "verb_index": verb})
    for obj in range(tax.num_objects):
        store.add(derive_record_id("semantic", "object", obj), world.object_semantic[obj],
                  {"image_id": -1, "role": "semantic", "object_index": obj})
    for h in range(tax.num_hoi):
        store.add(derive_record_id("semantic", "hoi", h),
                  world.prototypes[h].astype(np.float32),
                  {"image_id": -1, "role": "semantic", "hoi_index": h})

    def generate_split(split_tag: int, image_count: int, id_base: int,
                       query_prototypes: np.ndarray) -> tuple[list[ImageAnnotation], list[int]]:
        rng_plan = np.random.default_rng(np.random.SeedSequence([spec.seed, 4, split_tag]))
        pair_counts = [int(rng_plan.integers(spec.min_pairs, spec.max_pairs + 1))
                       for _ in range(image_count)]
        plan = _class_plan(spec, pair_counts, rng_plan)
        annotations = []
        counts = [0] * tax.num_hoi
        for i in range(image_count):
            image_id = id_base + i
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 5, split_tag, i]))
            image = np.full((spec.channels, size, size), 0.1, dtype=np.float64)
            image += spec.paint_noise * 0.4 * rng.standard_normal(image.shape)

            gt_pairs: list[GroundTruthPair] = []
            detections: list[Detection] = []
            det_slots: list[int] = []  # slot index per detection, -1 spurious
            slot_protos: list[np.ndarray] = []

            for slot, hoi in enumerate(plan[i]):
                verb, obj = tax.hoi_classes[hoi]
                verb_set = [verb]
                proto = query_prototypes[hoi]
                if spec.multi_verb_rate > 0 and rng.random() < spec.multi_verb_rate:
                    siblings = [h for h in world.by_object(obj) if h != hoi]
                    if siblings:
                        other = siblings[int(rng.integers(len(siblings)))]
                        verb_set.append(tax.hoi_classes[other][0])
                        proto = proto + query_prototypes[other]
                        proto = proto / np.linalg.norm(proto)
                human_box, object_box = _slot_boxes(_QUADRANTS[slot], half, spec.pattern_tile, rng)
                gt = GroundTruthPair(human_box, object_box, obj, tuple(sorted(set(verb_set))))
                gt_pairs.append(gt)
                slot_protos.append(proto)
                for v in gt.verb_set:
                    counts[tax.hoi_index(v, obj)] += 1

                _paint(image, union_box(human_box, object_box), world.patterns[hoi],
                       rng, spec.paint_noise)

                add_feature(image_id, "human", human_box,
                            _noisy_unit(proto, spec.feature_noise, rng))
                add_feature(image_id, "object", object_box,
                            _noisy_unit(proto, spec.feature_noise, rng))
                add_feature(image_id, "union", union_box(human_box, object_box),
                            _noisy_unit(proto, spec.feature_noise, rng))

                for box, class_id in ((human_box, tax.human_class), (object_box, obj)):
                    jittered = _jitter_box(box, spec.box_jitter, size, rng)
                    score = float(np.clip(spec.base_score + rng.normal(0.0, spec.score_noise),
                                          0.05, 1.0))
                    detections.append(Detection(box=jittered, score=round(score, 4),
                                                class_id=class_id))
                    det_slots.append(slot)
                    role = "human" if class_id == tax.human_class else "object"
                    add_feature(image_id, role, jittered,
                                _noisy_unit(proto, spec.feature_noise, rng))

            n_spurious = int(rng.poisson(spec.spurious_rate))
            for _ in range(n_spurious):
                quadrant = _QUADRANTS[int(rng.integers(4))]
                sx = quadrant[0] * half + rng.uniform(1, half / 2)
                sy = quadrant[1] * half + rng.uniform(1, half / 2)
                box = (round(sx, 4), round(sy, 4),
                       round(min(sx + rng.uniform(4, half - 3), size - 0.5), 4),
                       round(min(sy + rng.uniform(4, half - 3), size - 0.5), 4))
                class_id = int(rng.integers(tax.num_objects))
                score = float(np.clip(spec.spurious_score + rng.normal(0.0, 0.1), 0.05, 1.0))
                detections.append(Detection(box=box, score=round(score, 4), class_id=class_id))
                det_slots.append(-1)
                random_vec = _noisy_unit(rng.standard_normal(spec.feature_dim), 0.0, rng)
                role = "human" if class_id == tax.human_class else "object"
                add_feature(image_id, role, box, random_vec)

            # union features for every candidate pair inference could enumerate
            for hi, human in enumerate(detections):
                if human.class_id != tax.human_class:
                    continue
                for oi, other in enumerate(detections):
                    if oi == hi:
                        continue
                    ubox = union_box(human.box, other.box)
                    same_slot = det_slots[hi] == det_slots[oi] and det_slots[hi] >= 0
                    if same_slot:
                        vec = _noisy_unit(slot_protos[det_slots[hi]], spec.feature_noise, rng)
                    else:
                        vec = _noisy_unit(rng.standard_normal(spec.feature_dim), 0.0, rng)
                    add_feature(image_id, "union", ubox, vec)

            images_store.add(derive_record_id(image_id, "image"),
                             image.reshape(-1).astype(np.float32),
                             {"image_id": image_id, "role": "image",
                              "shape": [spec.channels, size, size]})
            annotations.append(ImageAnnotation(image_id, size, size,
                                               tuple(gt_pairs), tuple(detections)))
        return annotations, counts

    train_images, train_counts = generate_split(0, spec.train_images, TRAIN_ID_BASE,
                                                world.prototypes)
    test_images, _ = generate_split(1, spec.test_images, TEST_ID_BASE,
                                    world.test_prototypes)

    rare = tuple(c < 10 for c in train_counts)
    tax_flagged = Taxonomy(tax.verbs, tax.objects, tax.hoi_classes, tax.human_class,
                           rare, (False,) * tax.num_hoi)
    train = DatasetAnnotations(tax_flagged, tuple(train_images), tuple(train_counts))
    test = DatasetAnnotations(tax_flagged, tuple(test_images), tuple(train_counts))
    return SyntheticBundle(spec=spec, train=train, test=test, store=store,
                           images=images_store, frequencies=list(train_counts))


def write_bundle(bundle: SyntheticBundle, out_dir: str | Path) -> dict[str, str]:
    """Standard artifact files: annotations, feature store, image store, world spec."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_annotations": out / "train.json",
        "test_annotations": out / "test.json",
        "features": out / "features.acfb",
        "images": out / "images.acfb",
        "world": out / "world.json",
    }
    save_annotations(bundle.train, paths["train_annotations"])
    save_annotations(bundle.test, paths["test_annotations"])
    write_feature_store(bundle.store, paths["features"])
    write_feature_store(bundle.images, paths["images"])
    write_json(bundle.spec.to_dict(), paths["world"])
    return {k: str(v) for k, v in paths.items()}
