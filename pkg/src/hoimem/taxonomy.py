"""Vocabularies, dataset annotations and prompt rendering.

The annotation document is JSON with top-level ``taxonomy`` and ``images``
keys.  Boxes are absolute-pixel ``[x1, y1, x2, y2]`` everywhere; any other
convention must be converted before the data enters this module.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

from hoimem.errors import InputError
from hoimem.pairing import Detection

RARE_THRESHOLD = 10  # classes with fewer training instances count as rare

PROMPT_TEMPLATE = "A photo of a person is <ACTION> an object"

Box = tuple[float, float, float, float]


def read_json(path: str | Path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc


def write_json(obj, path: str | Path) -> None:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
        fh.write("\n")


@dataclass(frozen=True)
class Taxonomy:
    """Verb and object vocabularies plus the set of valid verb-object classes."""

    verbs: tuple[str, ...]
    objects: tuple[str, ...]
    hoi_classes: tuple[tuple[int, int], ...]
    human_class: int
    rare_flags: tuple[bool, ...] = ()
    heldout_flags: tuple[bool, ...] = ()

    @property
    def num_verbs(self) -> int:
        return len(self.verbs)

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_hoi(self) -> int:
        return len(self.hoi_classes)

    def hoi_index(self, verb: int, object_class: int) -> int | None:
        return _pair_index(self.hoi_classes).get((verb, object_class))

    def validate(self) -> "Taxonomy":
        if not self.verbs:
            raise InputError("taxonomy needs at least one verb")
        if not 0 <= self.human_class < len(self.objects):
            raise InputError(f"human_class {self.human_class} outside object vocabulary")
        seen = set()
        for verb, obj in self.hoi_classes:
            if not (0 <= verb < len(self.verbs) and 0 <= obj < len(self.objects)):
                raise InputError(f"hoi class ({verb},{obj}) outside vocabulary bounds")
            if (verb, obj) in seen:
                raise InputError(f"duplicate hoi class ({verb},{obj})")
            seen.add((verb, obj))
        for name in ("rare_flags", "heldout_flags"):
            flags = getattr(self, name)
            if flags and len(flags) != len(self.hoi_classes):
                raise InputError(f"{name} length {len(flags)} != {len(self.hoi_classes)} hoi classes")
        return self

    def with_heldout(self, heldout: tuple[bool, ...]) -> "Taxonomy":
        if len(heldout) != self.num_hoi:
            raise InputError("heldout flag list length mismatch")
        return Taxonomy(self.verbs, self.objects, self.hoi_classes, self.human_class,
                        self.rare_flags, tuple(heldout))

    def to_dict(self) -> dict:
        return {
            "verbs": list(self.verbs),
            "objects": list(self.objects),
            "hoi_classes": [list(pair) for pair in self.hoi_classes],
            "human_class": self.human_class,
            "rare_flags": [bool(f) for f in self.rare_flags],
            "heldout_flags": [bool(f) for f in self.heldout_flags],
        }


_PAIR_INDEX_CACHE: dict[tuple, dict] = {}


def _pair_index(hoi_classes: tuple[tuple[int, int], ...]) -> dict[tuple[int, int], int]:
    cached = _PAIR_INDEX_CACHE.get(hoi_classes)
    if cached is None:
        cached = {pair: i for i, pair in enumerate(hoi_classes)}
        _PAIR_INDEX_CACHE[hoi_classes] = cached
    return cached


@dataclass(frozen=True)
class GroundTruthPair:
    human_box: Box
    object_box: Box
    object_class: int
    verb_set: tuple[int, ...]


@dataclass(frozen=True)
class ImageAnnotation:
    image_id: int
    width: int
    height: int
    gt_pairs: tuple[GroundTruthPair, ...]
    detections: tuple[Detection, ...]


@dataclass(frozen=True)
class DatasetAnnotations:
    taxonomy: Taxonomy
    images: tuple[ImageAnnotation, ...]
    hoi_counts: tuple[int, ...]  # training instances per hoi class


def clamp_box(box, width: int, height: int) -> Box:
    x1, y1, x2, y2 = (float(v) for v in box)
    return (min(max(x1, 0.0), float(width)), min(max(y1, 0.0), float(height)),
            min(max(x2, 0.0), float(width)), min(max(y2, 0.0), float(height)))


def _check_box(box: Box, image_id, fieldname: str) -> None:
    x1, y1, x2, y2 = box
    if not (x2 > x1 and y2 > y1):
        raise InputError(f"image {image_id}: {fieldname} degenerate after clamping: {list(box)}")


def load_taxonomy(data: dict, counts: tuple[int, ...] | None = None) -> Taxonomy:
    try:
        hoi_classes = tuple((int(v), int(o)) for v, o in data["hoi_classes"])
        taxonomy = Taxonomy(
            verbs=tuple(data["verbs"]),
            objects=tuple(data["objects"]),
            hoi_classes=hoi_classes,
            human_class=int(data["human_class"]),
            rare_flags=tuple(bool(f) for f in data.get("rare_flags") or ()),
            heldout_flags=tuple(bool(f) for f in data.get("heldout_flags") or ()),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed taxonomy section: {exc}") from exc
    taxonomy.validate()
    if not taxonomy.rare_flags and counts is not None:
        taxonomy = Taxonomy(taxonomy.verbs, taxonomy.objects, taxonomy.hoi_classes,
                            taxonomy.human_class,
                            tuple(c < RARE_THRESHOLD for c in counts),
                            taxonomy.heldout_flags)
    if not taxonomy.heldout_flags:
        taxonomy = taxonomy.with_heldout((False,) * taxonomy.num_hoi)
    return taxonomy


def load_annotations(path: str | Path) -> DatasetAnnotations:
    """Parse, clamp and validate an annotation document.

    Rare flags come from the document when present, otherwise they are
    computed from the per-class training-instance counts (< 10 is rare).
    """
    data = read_json(path)
    if not isinstance(data, dict) or "taxonomy" not in data or "images" not in data:
        raise InputError(f"{path}: expected top-level 'taxonomy' and 'images' keys")
    taxonomy = load_taxonomy(data["taxonomy"])
    pair_idx = _pair_index(taxonomy.hoi_classes)

    counts = [0] * taxonomy.num_hoi
    images = []
    for entry in data["images"]:
        try:
            image_id = int(entry["image_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"image entry missing a valid image_id: {exc}") from exc
        try:
            width, height = int(entry["width"]), int(entry["height"])
            raw_gt = entry.get("gt_pairs", [])
            raw_det = entry.get("detections", [])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"image {image_id}: malformed entry: {exc}") from exc
        if width <= 0 or height <= 0:
            raise InputError(f"image {image_id}: non-positive dimensions")

        gt_pairs = []
        for g in raw_gt:
            try:
                human_box = clamp_box(g["human_box"], width, height)
                object_box = clamp_box(g["object_box"], width, height)
                object_class = int(g["object_class"])
                verb_set = tuple(int(v) for v in g["verb_set"])
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"image {image_id}: malformed gt pair: {exc}") from exc
            _check_box(human_box, image_id, "gt human_box")
            _check_box(object_box, image_id, "gt object_box")
            if not 0 <= object_class < taxonomy.num_objects:
                raise InputError(f"image {image_id}: gt object_class {object_class} out of range")
            if not verb_set:
                raise InputError(f"image {image_id}: gt pair with empty verb_set")
            for verb in verb_set:
                if not 0 <= verb < taxonomy.num_verbs:
                    raise InputError(f"image {image_id}: gt verb index {verb} out of range")
                hoi = pair_idx.get((verb, object_class))
                if hoi is None:
                    raise InputError(
                        f"image {image_id}: gt pair (verb={verb}, object={object_class}) "
                        f"is not a taxonomy hoi class")
                counts[hoi] += 1
            gt_pairs.append(GroundTruthPair(human_box, object_box, object_class, verb_set))

        detections = []
        for d in raw_det:
            try:
                box = clamp_box(d["box"], width, height)
                score = float(d["score"])
                class_id = int(d["class_id"])
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"image {image_id}: malformed detection: {exc}") from exc
            _check_box(box, image_id, "detection box")
            if not 0.0 <= score <= 1.0:
                raise InputError(f"image {image_id}: detection score {score} outside [0,1]")
            if not 0 <= class_id < taxonomy.num_objects:
                raise InputError(f"image {image_id}: detection class_id {class_id} out of range")
            detections.append(Detection(box=box, score=score, class_id=class_id))

        images.append(ImageAnnotation(image_id, width, height, tuple(gt_pairs), tuple(detections)))

    counts_t = tuple(counts)
    taxonomy = load_taxonomy(data["taxonomy"], counts=counts_t)
    return DatasetAnnotations(taxonomy=taxonomy, images=tuple(images), hoi_counts=counts_t)


def annotations_to_dict(annotations: DatasetAnnotations) -> dict:
    return {
        "taxonomy": annotations.taxonomy.to_dict(),
        "images": [
            {
                "image_id": img.image_id,
                "width": img.width,
                "height": img.height,
                "gt_pairs": [
                    {
                        "human_box": list(g.human_box),
                        "object_box": list(g.object_box),
                        "object_class": g.object_class,
                        "verb_set": list(g.verb_set),
                    }
                    for g in img.gt_pairs
                ],
                "detections": [
                    {"box": list(d.box), "score": d.score, "class_id": d.class_id}
                    for d in img.detections
                ],
            }
            for img in annotations.images
        ],
    }


def save_annotations(annotations: DatasetAnnotations, path: str | Path) -> None:
    write_json(annotations_to_dict(annotations), path)


def render_prompts(taxonomy: Taxonomy) -> list[str]:
    """One prompt string per verb, template verbatim apart from the action slot."""
    if not taxonomy.verbs:
        raise InputError("cannot render prompts for a taxonomy without verbs")
    prompts = []
    for i, verb in enumerate(taxonomy.verbs):
        if not verb:
            warnings.warn(f"verb {i} is empty; prompt keeps the blank action slot")
        prompts.append(PROMPT_TEMPLATE.replace("<ACTION>", verb))
    return prompts
