"""Candidate human-object pair construction from raw detections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from hoimem.config import RunConfig
    from hoimem.taxonomy import Taxonomy

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int


@dataclass(frozen=True)
class HumanObjectPair:
    """A candidate pair: the detected human, the detected object, their union box.

    ``pair_id`` is (image_id, index of the human, index of the object), both
    indices into the filtered detection list the pair was enumerated from.
    """

    human: Detection
    object: Detection
    union: Box
    pair_id: tuple

    @property
    def score_product(self) -> float:
        return self.human.score * self.object.score


def union_box(a: Box, b: Box) -> Box:
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def box_area(box: Box) -> float:
    return max(box[2] - box[0], 0.0) * max(box[3] - box[1], 0.0)


def box_iou(a: Box, b: Box) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(ix2 - ix1, 0.0) * max(iy2 - iy1, 0.0)
    if inter == 0.0:
        return 0.0
    return inter / (box_area(a) + box_area(b) - inter)


def filter_detections(detections: list[Detection], config: "RunConfig") -> list[Detection]:
    """Drop low-confidence detections, then cap each class at top-k by score.

    Ties break in favor of earlier input positions; the surviving detections
    keep their original relative order.
    """
    above = [(i, d) for i, d in enumerate(detections) if d.score >= config.min_score]
    by_class: dict[int, list[tuple[int, Detection]]] = {}
    for i, d in above:
        by_class.setdefault(d.class_id, []).append((i, d))
    keep: set[int] = set()
    for entries in by_class.values():
        ranked = sorted(entries, key=lambda pair: (-pair[1].score, pair[0]))
        keep.update(i for i, _ in ranked[: config.top_k_per_class])
    return [d for i, d in above if i in keep]


def enumerate_pairs(detections: list[Detection], taxonomy: "Taxonomy",
                    image_id: int) -> list[HumanObjectPair]:
    """Every (human, other detection) combination, human-major order.

    Humans pair with every other detection including other humans; a
    detection never pairs with itself.
    """
    pairs = []
    for hi, human in enumerate(detections):
        if human.class_id != taxonomy.human_class:
            continue
        for oi, obj in enumerate(detections):
            if oi == hi:
                continue
            pairs.append(HumanObjectPair(
                human=human, object=obj,
                union=union_box(human.box, obj.box),
                pair_id=(image_id, hi, oi),
            ))
    return pairs
