import numpy as np
import pytest

from hoimem.errors import InputError
from hoimem.evaluation import (ScoredTriplet, aggregate, average_precision,
                               predictions_to_triplets, read_predictions, write_predictions,
                               write_report)
from hoimem.pairing import Detection, HumanObjectPair, union_box

from conftest import tiny_taxonomy
from oracles import average_precision_bruteforce, mean_or_none

BOX_A = (0.0, 0.0, 10.0, 10.0)
BOX_B = (20.0, 0.0, 30.0, 10.0)
BOX_C = (0.0, 20.0, 10.0, 30.0)
BOX_FAR = (40.0, 40.0, 50.0, 50.0)


def triplet(score, image_id=1, hbox=BOX_A, obox=BOX_B, hoi=0):
    return ScoredTriplet(image_id, hbox, obox, hoi, score)


class TestAveragePrecision:
    def test_single_match_is_perfect(self):
        ap = average_precision([triplet(0.9)], [(1, BOX_A, BOX_B)])
        assert ap == 1.0

    def test_nonmatch_then_match_halves_ap(self):
        preds = [triplet(0.9, hbox=BOX_FAR, obox=BOX_FAR), triplet(0.8)]
        ap = average_precision(preds, [(1, BOX_A, BOX_B)])
        assert ap == pytest.approx(0.5, abs=1e-12)

    def test_hand_computed_two_gt_case(self):
        gts = [(1, BOX_A, BOX_B), (1, BOX_C, BOX_B)]
        preds = [
            triplet(0.9, hbox=BOX_A, obox=BOX_B),   # TP on gt1
            triplet(0.8, hbox=BOX_A, obox=BOX_B),   # duplicate -> FP
            triplet(0.7, hbox=BOX_C, obox=BOX_B),   # TP on gt2
        ]
        ap = average_precision(preds, gts)
        assert ap == pytest.approx(1.0 * 0.5 + (2.0 / 3.0) * 0.5, abs=1e-12)

    def test_no_gt_no_predictions_excluded(self):
        assert average_precision([], []) is None

    def test_no_gt_with_predictions_scores_zero(self):
        assert average_precision([triplet(0.5)], []) == 0.0

    def test_rank_only_dependence(self):
        rng = np.random.default_rng(0)
        gts = [(1, BOX_A, BOX_B), (2, BOX_A, BOX_B), (2, BOX_C, BOX_B)]
        preds = [triplet(float(s), image_id=int(i), hbox=h, obox=BOX_B)
                 for s, i, h in zip(rng.uniform(0.1, 0.9, 6),
                                    [1, 1, 2, 2, 2, 1],
                                    [BOX_A, BOX_FAR, BOX_A, BOX_C, BOX_FAR, BOX_C])]
        base = average_precision(preds, gts)
        # strictly monotone transform of all scores preserves ranking
        warped = [ScoredTriplet(t.image_id, t.human_box, t.object_box, t.hoi_class,
                                float(np.tanh(3.0 * t.score) + 5.0)) for t in preds]
        assert average_precision(warped, gts) == base

    def test_appended_low_rank_false_positive_never_raises_ap(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            gts = [(1, BOX_A, BOX_B)]
            preds = [triplet(float(rng.uniform(0.5, 1.0)),
                             hbox=BOX_A if rng.random() < 0.5 else BOX_FAR)]
            base = average_precision(preds, gts)
            worse = preds + [triplet(0.01, hbox=BOX_FAR, obox=BOX_FAR)]
            assert average_precision(worse, gts) <= base + 1e-12

    def test_appended_low_rank_true_positive_never_lowers_ap(self):
        gts = [(1, BOX_A, BOX_B), (1, BOX_C, BOX_B)]
        preds = [triplet(0.9), triplet(0.5, hbox=BOX_FAR, obox=BOX_FAR)]
        base = average_precision(preds, gts)
        better = preds + [triplet(0.01, hbox=BOX_C)]
        assert average_precision(better, gts) >= base - 1e-12

    def test_matches_bruteforce_exactly_on_random_instances(self):
        rng = np.random.default_rng(2)
        boxes = [BOX_A, BOX_B, BOX_C, BOX_FAR,
                 (2.0, 2.0, 11.0, 11.0), (21.0, 1.0, 29.0, 12.0)]
        for trial in range(100):
            gts = [(int(rng.integers(1, 4)), boxes[int(rng.integers(0, 6))],
                    boxes[int(rng.integers(0, 6))])
                   for _ in range(int(rng.integers(0, 5)))]
            preds = [triplet(float(rng.uniform(0, 1)),
                             image_id=int(rng.integers(1, 4)),
                             hbox=boxes[int(rng.integers(0, 6))],
                             obox=boxes[int(rng.integers(0, 6))])
                     for _ in range(int(rng.integers(0, 8)))]
            got = average_precision(preds, gts)
            want = average_precision_bruteforce(
                [(t.image_id, t.human_box, t.object_box, t.score) for t in preds], gts)
            assert got == want, f"trial {trial}: {got} != {want}"


class TestTriplets:
    taxonomy = tiny_taxonomy(classes=[(0, 0), (1, 0), (2, 1)])  # person = object 3

    def pair(self, object_class=0):
        human = Detection(BOX_A, 0.9, 3)
        obj = Detection(BOX_B, 0.8, object_class)
        return HumanObjectPair(human, obj, union_box(BOX_A, BOX_B), (1, 0, 1))

    def test_invalid_combo_dropped(self):
        # object 2 hosts no hoi classes at all
        triplets = predictions_to_triplets([self.pair(2)], [np.ones(4)], self.taxonomy)
        assert triplets == []

    def test_all_valid_combos_emitted(self):
        triplets = predictions_to_triplets([self.pair(0)], [np.arange(4.0)], self.taxonomy)
        assert [(t.hoi_class, t.score) for t in triplets] == [(0, 0.0), (1, 1.0)]

    def test_count_matches_bruteforce_filter(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pairs = [self.pair(int(rng.integers(0, 4))) for _ in range(5)]
            scores = [rng.uniform(0, 1, 4) for _ in pairs]
            triplets = predictions_to_triplets(pairs, scores, self.taxonomy)
            expected = sum(1 for p in pairs for v in range(4)
                           if (v, p.object.class_id) in set(self.taxonomy.hoi_classes))
            assert len(triplets) == expected


class TestAggregate:
    def test_uniform_aps(self):
        taxonomy = tiny_taxonomy()
        report = aggregate([0.4] * 4, taxonomy, [1] * 4, [1] * 4)
        assert report.map_full == pytest.approx(0.4)
        assert report.map_nonrare == pytest.approx(0.4)

    def test_rare_split(self):
        taxonomy = tiny_taxonomy(num_verbs=2, num_objects=3, classes=[(0, 0), (1, 1)],
                                 rare=[True, False])
        report = aggregate([1.0, 0.0], taxonomy, [2, 2], [2, 2])
        assert report.map_rare == 1.0
        assert report.map_nonrare == 0.0
        assert report.map_full == 0.5

    def test_random_against_mean_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = 6
            rare = [bool(rng.random() < 0.3) for _ in range(n)]
            heldout = [bool(rng.random() < 0.3) for _ in range(n)]
            taxonomy = tiny_taxonomy(num_verbs=n, num_objects=3,
                                     classes=[(v, 0) for v in range(n)],
                                     rare=rare, heldout=heldout)
            aps = [None if rng.random() < 0.2 else float(rng.uniform(0, 1))
                   for _ in range(n)]
            report = aggregate(aps, taxonomy, [1] * n, [1] * n)
            idx = range(n)
            has_heldout = any(heldout)  # the zero-shot split exists only when flagged
            checks = {
                "full": mean_or_none([aps[i] for i in idx]),
                "rare": mean_or_none([aps[i] for i in idx if rare[i]]),
                "nonrare": mean_or_none([aps[i] for i in idx if not rare[i]]),
                "seen": mean_or_none([aps[i] for i in idx if not heldout[i]])
                        if has_heldout else None,
                "unseen": mean_or_none([aps[i] for i in idx if heldout[i]])
                          if has_heldout else None,
            }
            got = {"full": report.map_full, "rare": report.map_rare,
                   "nonrare": report.map_nonrare, "seen": report.map_seen,
                   "unseen": report.map_unseen}
            for key in checks:
                if checks[key] is None:
                    assert got[key] is None, key
                else:
                    assert got[key] == pytest.approx(checks[key], abs=1e-12), key

    def test_empty_split_reported_absent(self):
        taxonomy = tiny_taxonomy(rare=[False] * 4)
        report = aggregate([0.5] * 4, taxonomy, [1] * 4, [1] * 4)
        assert report.map_rare is None
        assert report.map_seen is None  # no held-out flags set anywhere


class TestFiles:
    def test_predictions_roundtrip(self, tmp_path):
        triplets = [triplet(0.5), triplet(0.25, image_id=2, hoi=1)]
        path = tmp_path / "preds.json"
        write_predictions(triplets, path)
        assert read_predictions(path) == triplets

    def test_report_files(self, tmp_path):
        taxonomy = tiny_taxonomy()
        report = aggregate([0.5, None, 1.0, 0.0], taxonomy, [1, 0, 2, 1], [3, 0, 2, 2])
        write_report(report, taxonomy, tmp_path / "r.json", tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().strip().split("\n")
        assert lines[0] == "class_id,verb,object,gt_count,ap"
        assert len(lines) == 5
        assert lines[2].endswith(",0,")  # absent AP stays empty

    def test_malformed_predictions(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"triplets": [{"image_id": 1}]}')
        with pytest.raises(InputError, match="malformed"):
            read_predictions(path)
