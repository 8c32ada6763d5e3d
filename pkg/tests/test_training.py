import dataclasses
import math

import numpy as np
import pytest

from hoimem import numkernel as nk
from hoimem.config import RunConfig
from hoimem.errors import InputError
from hoimem.memory import build_memory, score_pair, suppress
from hoimem.pairing import Detection, HumanObjectPair, union_box
from hoimem.pipeline import _bundle_index
from hoimem.synth import generate, get_profile
from hoimem.training import (Trainer, assign_targets, finetune, focal_loss,
                             focal_loss_graph, frozen_fingerprint, load_checkpoint,
                             save_checkpoint, tuned_memory)

from conftest import tiny_taxonomy

# frozen: 0.25 * (1 - 0.5)^2 * (-log 0.5) = 0.25 * 0.25 * ln 2
FOCAL_CLOSED_FORM = 0.0433216987849966


def pair_at(hbox, obox, object_class=0, scores=(0.9, 0.8)):
    return HumanObjectPair(
        human=Detection(hbox, scores[0], 3),
        object=Detection(obox, scores[1], object_class),
        union=union_box(hbox, obox),
        pair_id=(1, 0, 1),
    )


class FakeGT:
    def __init__(self, human_box, object_box, object_class, verb_set):
        self.human_box = human_box
        self.object_box = object_box
        self.object_class = object_class
        self.verb_set = verb_set


class TestAssignTargets:
    taxonomy = tiny_taxonomy(classes=[(0, 0), (1, 0), (2, 1), (3, 2)])

    def test_exact_boxes_one_hot(self):
        gt = FakeGT((0, 0, 10, 10), (12, 0, 20, 10), 0, (2,))
        taxonomy = tiny_taxonomy(classes=[(2, 0), (1, 0), (0, 1), (3, 2)])
        targets = assign_targets([pair_at((0, 0, 10, 10), (12, 0, 20, 10))],
                                 [gt], taxonomy)
        np.testing.assert_array_equal(targets[0], [0, 0, 1, 0])

    def test_class_mismatch_zeroes_target(self):
        gt = FakeGT((0, 0, 10, 10), (12, 0, 20, 10), 1, (2,))
        targets = assign_targets([pair_at((0, 0, 10, 10), (12, 0, 20, 10),
                                          object_class=0)],
                                 [gt], self.taxonomy)
        np.testing.assert_array_equal(targets[0], np.zeros(4))

    def test_two_overlapping_gts_union_verbs(self):
        gts = [FakeGT((0, 0, 10, 10), (12, 0, 20, 10), 0, (1,)),
               FakeGT((1, 0, 11, 10), (11, 0, 19, 10), 0, (0,))]
        # both gts overlap the candidate at IoU >= 0.5 -> verbs {0, 1}
        targets = assign_targets([pair_at((0, 0, 10, 10), (12, 0, 20, 10))],
                                 gts, self.taxonomy)
        np.testing.assert_array_equal(targets[0], [1, 1, 0, 0])

    def test_matches_bruteforce_matcher(self):
        from oracles import iou
        rng = np.random.default_rng(0)
        boxes = [(0, 0, 10, 10), (2, 2, 12, 12), (20, 20, 30, 30), (5, 0, 14, 9)]
        for _ in range(30):
            pairs = [pair_at(boxes[int(rng.integers(4))], boxes[int(rng.integers(4))],
                             object_class=int(rng.integers(3)))
                     for _ in range(3)]
            gts = [FakeGT(boxes[int(rng.integers(4))], boxes[int(rng.integers(4))],
                          int(rng.integers(3)), (int(rng.integers(4)),))
                   for _ in range(3)]
            got = assign_targets(pairs, gts, self.taxonomy)
            for i, p in enumerate(pairs):
                expected = np.zeros(4)
                for g in gts:
                    if (p.object.class_id == g.object_class
                            and iou(p.human.box, g.human_box) >= 0.5
                            and iou(p.object.box, g.object_box) >= 0.5):
                        for v in g.verb_set:
                            expected[v] = 1.0
                np.testing.assert_array_equal(got[i], expected)


class TestFocalLoss:
    def test_reduces_to_half_bce_at_gamma_zero(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.05, 0.95, (4, 6))
        y = (rng.random((4, 6)) < 0.5).astype(np.float64)
        got = focal_loss(p, y, alpha=0.5, gamma_f=0.0)
        bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
        assert abs(got - 0.5 * bce) < 1e-7

    def test_closed_form_single_entry(self):
        got = focal_loss(np.array([0.5]), np.array([1.0]), alpha=0.25, gamma_f=2.0)
        assert abs(got - FOCAL_CLOSED_FORM) < 1e-9
        assert abs(got - 0.25 * 0.25 * math.log(2.0)) < 1e-12

    def test_perfect_prediction_is_tiny(self):
        p = np.array([1.0, 0.0, 1.0])
        y = np.array([1.0, 0.0, 1.0])
        assert focal_loss(p, y, 0.25, 2.0) <= 2e-6

    def test_nonfinite_input_rejected(self):
        with pytest.raises(InputError, match="finite"):
            focal_loss(np.array([np.nan]), np.array([1.0]), 0.25, 2.0)

    def test_graph_version_matches_numpy(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.01, 0.99, (3, 5))
        y = (rng.random((3, 5)) < 0.4).astype(np.float64)
        tape = nk.Tape()
        loss = focal_loss_graph(tape, nk.Tensor(p), y, alpha=0.25, gamma_f=2.0)
        assert abs(loss.item() - focal_loss(p, y, 0.25, 2.0)) < 1e-12


@pytest.fixture(scope="module")
def shifted_setup():
    bundle = generate(get_profile("toy"))
    config = RunConfig().validate()
    index = _bundle_index(bundle)
    memory = build_memory(bundle.train, index, config)
    return bundle, index, memory, config


class TestFinetune:
    def test_zero_epochs_changes_nothing(self, shifted_setup):
        bundle, index, memory, config = shifted_setup
        cfg = config.replace(epochs=0)
        state = finetune(bundle.train, index, memory, cfg)
        assert state.loss_history == []
        np.testing.assert_array_equal(state.keys_ic.data, memory.ic.keys)
        reference = Trainer(bundle.train, index, memory, cfg).state
        for name, tensor in state.trainable.params.items():
            np.testing.assert_array_equal(tensor.data, reference.trainable[name].data)

    def test_same_seed_is_bitwise_identical(self, shifted_setup):
        bundle, index, memory, config = shifted_setup
        cfg = config.replace(epochs=2)
        a = finetune(bundle.train, index, memory, cfg)
        b = finetune(bundle.train, index, memory, cfg)
        for name in a.trainable.params:
            assert a.trainable[name].data.tobytes() == b.trainable[name].data.tobytes(), name

    def test_frozen_set_untouched(self, shifted_setup):
        bundle, index, memory, config = shifted_setup
        labels_before = (memory.ic.labels.tobytes(), memory.ia.labels.tobytes(),
                         memory.w_t.tobytes())
        trainer = Trainer(bundle.train, index, memory, config.replace(epochs=2))
        fingerprint = frozen_fingerprint(trainer.state)
        state = trainer.run()
        assert frozen_fingerprint(state) == fingerprint
        after = (memory.ic.labels.tobytes(), memory.ia.labels.tobytes(),
                 memory.w_t.tobytes())
        assert labels_before == after
        assert not np.array_equal(state.keys_ic.data, memory.ic.keys)  # keys did move

    def test_keys_stay_unit_norm_with_normalization_on(self, shifted_setup):
        bundle, index, memory, config = shifted_setup
        state = finetune(bundle.train, index, memory, config.replace(epochs=1))
        norms = np.linalg.norm(state.keys_ic.data, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_empty_training_set_rejected(self, shifted_setup):
        bundle, index, memory, config = shifted_setup
        empty = dataclasses.replace(bundle.train, images=())
        with pytest.raises(InputError, match="non-empty"):
            finetune(empty, index, memory, config)

    def test_zero_targets_with_silenced_negatives_moves_nothing(self, shifted_setup):
        # alpha weighs the positive term, (1-alpha) the negative one; with
        # all-zero targets the loss has no active term only at alpha=1, and
        # then nothing may move when weight decay is off
        bundle, index, memory, config = shifted_setup
        cfg = config.replace(epochs=1, focal_alpha=1.0, weight_decay=0.0,
                             normalize_keys=False)
        images = [dataclasses.replace(img, gt_pairs=()) for img in bundle.train.images]
        no_gt = dataclasses.replace(bundle.train, images=tuple(images))
        state = finetune(no_gt, index, memory, cfg)
        assert state.loss_history[0] == 0.0
        np.testing.assert_array_equal(state.keys_ic.data, memory.ic.keys)
        reference = Trainer(no_gt, index, memory, cfg).state
        for name, tensor in state.trainable.params.items():
            np.testing.assert_array_equal(tensor.data, reference.trainable[name].data)

    def test_graph_scoring_matches_numpy_scoring(self, shifted_setup):
        bundle, index, memory, config = shifted_setup
        trainer = Trainer(bundle.train, index, memory, config, dtype=np.float64)
        img = next(img for img in bundle.train.images
                   if trainer._prepare_image(img) is not None)
        pairs, targets, priors, factors, grid = trainer._prepare_image(img)
        from hoimem.encoder import encode, extract_pair_features
        tape = nk.Tape()
        enc = encode(tape, grid, priors, trainer.state.encoder_weights,
                     trainer.state.adapters, config)
        raw_rows = []
        for pair in pairs:
            f_ic, f_ia, f_u = extract_pair_features(tape, enc, pair, config)
            raw = score_pair(memory, f_ic.data[0], f_ia.data[0], f_u.data[0],
                             object_class=pair.object.class_id)
            raw_rows.append(suppress(raw, pair.human.score, pair.object.score,
                                     config.lambda_train))
        loss_np = focal_loss(np.stack(raw_rows), targets,
                             config.focal_alpha, config.focal_gamma)
        tape2 = nk.Tape()
        loss_graph = trainer.image_loss(tape2, img).item()
        assert abs(loss_np - loss_graph) < 1e-9


class TestCheckpoint:
    def test_roundtrip(self, shifted_setup, tmp_path):
        bundle, index, memory, config = shifted_setup
        state = finetune(bundle.train, index, memory, config.replace(epochs=1))
        path = tmp_path / "ckpt.acfb"
        save_checkpoint(state, path)
        adapters, keys_ic, keys_ia, cfg, meta = load_checkpoint(path)
        np.testing.assert_array_equal(keys_ic, state.keys_ic.data.astype(np.float32))
        np.testing.assert_array_equal(keys_ia, state.keys_ia.data.astype(np.float32))
        assert cfg.seed == config.seed
        assert meta["epochs_trained"] == 1
        for i, block in enumerate(adapters):
            np.testing.assert_array_equal(
                block.w_up.data, state.adapters[i].w_up.data.astype(np.float32))

    def test_checkpoint_inference_matches_in_memory_inference(self, shifted_setup, tmp_path):
        from hoimem.evaluation import read_predictions, write_predictions
        from hoimem.memory import write_memory
        from hoimem.pipeline import _EncoderFeatures, infer_triplets, run_infer
        from hoimem.encoder import init_encoder_weights
        from hoimem.synth import write_bundle
        from hoimem.taxonomy import save_annotations

        bundle, index, memory, config = shifted_setup
        cfg = config.replace(epochs=1)
        state = finetune(bundle.train, index, memory, cfg)
        weights = init_encoder_weights(cfg, seed=cfg.seed)
        provider = _EncoderFeatures(index, weights, state.adapters, cfg)
        direct = infer_triplets(bundle.test, tuned_memory(state), provider, cfg)

        paths = write_bundle(bundle, tmp_path / "world")
        write_memory(memory, tmp_path / "memory.acmb")
        save_checkpoint(state, tmp_path / "ckpt.acfb")
        run_infer(paths["test_annotations"], paths["features"],
                  str(tmp_path / "memory.acmb"), str(tmp_path / "preds.json"), cfg,
                  checkpoint_path=str(tmp_path / "ckpt.acfb"),
                  images_path=paths["images"])
        via_checkpoint = read_predictions(tmp_path / "preds.json")

        write_predictions(direct, tmp_path / "direct.json")
        assert read_predictions(tmp_path / "direct.json") == via_checkpoint

    def test_tuned_memory_swaps_keys_only(self, shifted_setup):
        bundle, index, memory, config = shifted_setup
        state = finetune(bundle.train, index, memory, config.replace(epochs=1))
        tuned = tuned_memory(state)
        np.testing.assert_array_equal(tuned.ic.labels, memory.ic.labels)
        np.testing.assert_array_equal(tuned.w_t, memory.w_t)
        assert not np.array_equal(tuned.ic.keys, memory.ic.keys)
