import numpy as np
import pytest

from hoimem.config import RunConfig
from hoimem.memory import build_memory
from hoimem.pairing import Detection
from hoimem.storage import FeatureIndex, FeatureStore, derive_record_id
from hoimem.synth import generate, get_profile
from hoimem.taxonomy import (DatasetAnnotations, GroundTruthPair, ImageAnnotation,
                             Taxonomy)


@pytest.fixture(scope="session")
def config():
    return RunConfig().validate()


@pytest.fixture(scope="session")
def toy_bundle():
    return generate(get_profile("toy"))


@pytest.fixture(scope="session")
def easy_bundle():
    return generate(get_profile("easy"))


def tiny_taxonomy(num_verbs=4, num_objects=4, classes=None, rare=None, heldout=None):
    """Small hand-made taxonomy; object index num_objects-1 is the person."""
    if classes is None:
        classes = tuple((v, v % (num_objects - 1)) for v in range(num_verbs))
    n = len(classes)
    return Taxonomy(
        verbs=tuple(f"v{i}" for i in range(num_verbs)),
        objects=tuple(f"o{i}" for i in range(num_objects - 1)) + ("person",),
        hoi_classes=tuple(classes),
        human_class=num_objects - 1,
        rare_flags=tuple(rare) if rare else (False,) * n,
        heldout_flags=tuple(heldout) if heldout else (False,) * n,
    ).validate()


def hand_world(pairs_per_class, taxonomy, dim=8, seed=0, noise=0.0):
    """Annotations + store with one unit-norm direction per hoi class.

    ``pairs_per_class``: list of (hoi_class_index, verb_set or None) tuples,
    one image per pair, boxes fixed.
    """
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((taxonomy.num_hoi, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    store = FeatureStore(dim=dim)

    def unit(base):
        vec = base + noise * rng.standard_normal(dim) if noise else base.copy()
        return (vec / np.linalg.norm(vec)).astype(np.float32)

    for verb in range(taxonomy.num_verbs):
        rows = [protos[h] for h, (v, _) in enumerate(taxonomy.hoi_classes) if v == verb]
        base = np.mean(rows, axis=0) if rows else rng.standard_normal(dim)
        store.add(derive_record_id("sem", "verb", verb), unit(np.asarray(base)),
                  {"image_id": -1, "role": "semantic", "verb_index": verb})
    for obj in range(taxonomy.num_objects):
        store.add(derive_record_id("sem", "obj", obj), unit(rng.standard_normal(dim)),
                  {"image_id": -1, "role": "semantic", "object_index": obj})

    images = []
    counts = [0] * taxonomy.num_hoi
    hbox, obox, ubox = (2.0, 2.0, 10.0, 14.0), (12.0, 2.0, 20.0, 14.0), (2.0, 2.0, 20.0, 14.0)
    for i, (hoi, verbs) in enumerate(pairs_per_class):
        verb, obj = taxonomy.hoi_classes[hoi]
        verb_set = tuple(sorted(verbs)) if verbs else (verb,)
        image_id = 100 + i
        for role, box in (("human", hbox), ("object", obox), ("union", ubox)):
            store.add(derive_record_id(image_id, role, box), unit(protos[hoi]),
                      {"image_id": image_id, "role": role, "box": list(box)})
        for v in verb_set:
            counts[taxonomy.hoi_index(v, obj)] += 1
        images.append(ImageAnnotation(
            image_id=image_id, width=32, height=32,
            gt_pairs=(GroundTruthPair(hbox, obox, obj, verb_set),),
            detections=(Detection(hbox, 0.9, taxonomy.human_class),
                        Detection(obox, 0.9, obj)),
        ))
    annotations = DatasetAnnotations(taxonomy, tuple(images), tuple(counts))
    return annotations, store, protos


@pytest.fixture()
def hand_memory(config):
    taxonomy = tiny_taxonomy()
    annotations, store, protos = hand_world(
        [(0, None), (1, None), (2, None), (3, None)], taxonomy)
    memory = build_memory(annotations, FeatureIndex(store), config)
    return memory, annotations, store, protos
