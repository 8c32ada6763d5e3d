"""Detection-style evaluation: per-class average precision and split aggregates.

A predicted triplet counts as a true positive when both its boxes overlap an
unmatched ground-truth pair of the same image and class at IoU >= 0.5
(the minimum of the two IoUs decides).  AP is the exact area under the
all-point precision-recall curve; aggregates are plain means over the
full / rare / non-rare and seen / unseen class sets.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hoimem.errors import InputError
from hoimem.pairing import HumanObjectPair, box_iou
from hoimem.taxonomy import (Box, DatasetAnnotations, Taxonomy, read_json, write_json)

MATCH_IOU = 0.5


@dataclass(frozen=True)
class ScoredTriplet:
    image_id: int
    human_box: Box
    object_box: Box
    hoi_class: int
    score: float


def predictions_to_triplets(pairs: list[HumanObjectPair],
                            suppressed_scores: list[np.ndarray],
                            taxonomy: Taxonomy) -> list[ScoredTriplet]:
    """One triplet per (pair, verb) whose verb-object combination exists."""
    triplets = []
    for pair, scores in zip(pairs, suppressed_scores):
        image_id = pair.pair_id[0]
        for verb in range(taxonomy.num_verbs):
            hoi = taxonomy.hoi_index(verb, pair.object.class_id)
            if hoi is None:
                continue
            triplets.append(ScoredTriplet(
                image_id=image_id,
                human_box=pair.human.box,
                object_box=pair.object.box,
                hoi_class=hoi,
                score=float(scores[verb]),
            ))
    return triplets


def average_precision(triplets: list[ScoredTriplet],
                      gt_instances: list[tuple[int, Box, Box]]) -> float | None:
    """AP for one class; None when there is nothing to score (no gt, no predictions).

    Predictions are ranked by descending score with (image_id, insertion
    order) breaking ties; matching is greedy against unmatched ground truth.
    """
    if not gt_instances:
        return 0.0 if triplets else None

    order = sorted(range(len(triplets)),
                   key=lambda i: (-triplets[i].score, triplets[i].image_id, i))
    gt_by_image: dict[int, list[int]] = {}
    for g, (image_id, _, _) in enumerate(gt_instances):
        gt_by_image.setdefault(image_id, []).append(g)

    matched: set[int] = set()
    flags = []
    for i in order:
        t = triplets[i]
        best_g, best_overlap = -1, 0.0
        for g in gt_by_image.get(t.image_id, ()):
            if g in matched:
                continue
            _, gh, go = gt_instances[g]
            overlap = min(box_iou(t.human_box, gh), box_iou(t.object_box, go))
            if overlap >= MATCH_IOU and overlap > best_overlap:
                best_g, best_overlap = g, overlap
        if best_g >= 0:
            matched.add(best_g)
            flags.append(True)
        else:
            flags.append(False)

    num_gt = len(gt_instances)
    tp = 0
    precisions, recalls = [], []
    for rank, is_tp in enumerate(flags, start=1):
        tp += 1 if is_tp else 0
        precisions.append(tp / rank)
        recalls.append(tp / num_gt)

    # precision envelope: best precision at this rank or any later one
    envelope = [0.0] * len(precisions)
    running = 0.0
    for i in range(len(precisions) - 1, -1, -1):
        running = max(running, precisions[i])
        envelope[i] = running

    ap = 0.0
    previous_recall = 0.0
    for i in range(len(flags)):
        if flags[i]:
            ap += (recalls[i] - previous_recall) * envelope[i]
            previous_recall = recalls[i]
    return ap


@dataclass
class EvalReport:
    per_class_ap: list[float | None]
    gt_counts: list[int]
    prediction_counts: list[int]
    map_full: float | None
    map_rare: float | None
    map_nonrare: float | None
    map_seen: float | None
    map_unseen: float | None

    def to_dict(self, taxonomy: Taxonomy) -> dict:
        return {
            "aggregates": {
                "full": self.map_full,
                "rare": self.map_rare,
                "nonrare": self.map_nonrare,
                "seen": self.map_seen,
                "unseen": self.map_unseen,
            },
            "classes": [
                {
                    "class_id": h,
                    "verb": taxonomy.verbs[verb],
                    "object": taxonomy.objects[obj],
                    "gt_count": self.gt_counts[h],
                    "prediction_count": self.prediction_counts[h],
                    "ap": self.per_class_ap[h],
                    "rare": bool(taxonomy.rare_flags[h]) if taxonomy.rare_flags else False,
                    "heldout": bool(taxonomy.heldout_flags[h]) if taxonomy.heldout_flags else False,
                }
                for h, (verb, obj) in enumerate(taxonomy.hoi_classes)
            ],
        }


def _mean_over(aps: list[float | None], indices: list[int]) -> float | None:
    values = [aps[i] for i in indices if aps[i] is not None]
    if not values:
        return None
    return float(sum(values) / len(values))


def aggregate(per_class_ap: list[float | None], taxonomy: Taxonomy,
              gt_counts: list[int], prediction_counts: list[int]) -> EvalReport:
    """Means over the covered classes of each split; empty splits stay absent."""
    if len(per_class_ap) != taxonomy.num_hoi:
        raise InputError("per-class AP list length does not match the taxonomy")
    everything = list(range(taxonomy.num_hoi))
    rare = [h for h in everything if taxonomy.rare_flags and taxonomy.rare_flags[h]]
    nonrare = [h for h in everything if h not in set(rare)]
    heldout_set = any(taxonomy.heldout_flags)
    seen = [h for h in everything if not taxonomy.heldout_flags[h]] if heldout_set else []
    unseen = [h for h in everything if taxonomy.heldout_flags[h]] if heldout_set else []
    return EvalReport(
        per_class_ap=list(per_class_ap),
        gt_counts=list(gt_counts),
        prediction_counts=list(prediction_counts),
        map_full=_mean_over(per_class_ap, everything),
        map_rare=_mean_over(per_class_ap, rare),
        map_nonrare=_mean_over(per_class_ap, nonrare),
        map_seen=_mean_over(per_class_ap, seen) if heldout_set else None,
        map_unseen=_mean_over(per_class_ap, unseen) if heldout_set else None,
    )


def evaluate(annotations: DatasetAnnotations, triplets: list[ScoredTriplet],
             threads: int = 1) -> EvalReport:
    """Group predictions by class, compute per-class AP, aggregate the splits."""
    taxonomy = annotations.taxonomy
    gt_per_class: list[list[tuple[int, Box, Box]]] = [[] for _ in range(taxonomy.num_hoi)]
    for img in annotations.images:
        for gt in img.gt_pairs:
            for verb in gt.verb_set:
                hoi = taxonomy.hoi_index(verb, gt.object_class)
                gt_per_class[hoi].append((img.image_id, gt.human_box, gt.object_box))

    triplets_per_class: list[list[ScoredTriplet]] = [[] for _ in range(taxonomy.num_hoi)]
    for t in triplets:
        if not 0 <= t.hoi_class < taxonomy.num_hoi:
            raise InputError(f"triplet references unknown hoi class {t.hoi_class}")
        triplets_per_class[t.hoi_class].append(t)

    per_class: list[float | None] = [None] * taxonomy.num_hoi
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {h: pool.submit(average_precision, triplets_per_class[h], gt_per_class[h])
                       for h in range(taxonomy.num_hoi)}
        for h, future in futures.items():
            per_class[h] = future.result()
    else:
        for h in range(taxonomy.num_hoi):
            per_class[h] = average_precision(triplets_per_class[h], gt_per_class[h])

    return aggregate(per_class, taxonomy,
                     gt_counts=[len(g) for g in gt_per_class],
                     prediction_counts=[len(t) for t in triplets_per_class])


# --- files --------------------------------------------------------------------


def write_predictions(triplets: list[ScoredTriplet], path: str | Path) -> None:
    write_json({
        "triplets": [
            {"image_id": t.image_id, "human_box": list(t.human_box),
             "object_box": list(t.object_box), "hoi_class": t.hoi_class, "score": t.score}
            for t in triplets
        ]
    }, path)


def read_predictions(path: str | Path) -> list[ScoredTriplet]:
    data = read_json(path)
    try:
        return [ScoredTriplet(image_id=int(t["image_id"]),
                              human_box=tuple(float(v) for v in t["human_box"]),
                              object_box=tuple(float(v) for v in t["object_box"]),
                              hoi_class=int(t["hoi_class"]),
                              score=float(t["score"]))
                for t in data["triplets"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed predictions file: {exc}") from exc


def write_report(report: EvalReport, taxonomy: Taxonomy, json_path: str | Path,
                 csv_path: str | Path | None = None) -> None:
    write_json(report.to_dict(taxonomy), json_path)
    if csv_path is None:
        return
    lines = ["class_id,verb,object,gt_count,ap"]
    for h, (verb, obj) in enumerate(taxonomy.hoi_classes):
        ap = report.per_class_ap[h]
        lines.append(f"{h},{taxonomy.verbs[verb]},{taxonomy.objects[obj]},"
                     f"{report.gt_counts[h]},{'' if ap is None else repr(ap)}")
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
