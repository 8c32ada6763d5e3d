"""End-to-end operations behind the service endpoints and CLI subcommands."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from hoimem import numkernel as nk
from hoimem.config import RunConfig
from hoimem.encoder import (encode, extract_pair_features, featurize_priors,
                            init_encoder_weights, prior_matrix)
from hoimem.errors import InputError
from hoimem.evaluation import (EvalReport, evaluate, predictions_to_triplets,
                               read_predictions, write_predictions, write_report)
from hoimem.memory import (ConceptMemory, MemoryBranch, build_memory, read_memory,
                           score_pair, suppress, write_memory)
from hoimem.pairing import enumerate_pairs, filter_detections
from hoimem.storage import FeatureIndex, read_feature_store
from hoimem.synth import WorldSpec, generate, get_profile, write_bundle
from hoimem.taxonomy import (DatasetAnnotations, load_annotations, load_taxonomy,
                             read_json, render_prompts)
from hoimem.training import Trainer, finetune, load_checkpoint, save_checkpoint


def run_prompts(taxonomy_path: str) -> list[str]:
    """Prompt strings for a taxonomy file (either bare or a full annotation doc)."""
    data = read_json(taxonomy_path)
    if isinstance(data, dict) and "taxonomy" in data:
        data = data["taxonomy"]
    return render_prompts(load_taxonomy(data))


def run_synth(out_dir: str, profile: str | None = None, spec_path: str | None = None,
              seed: int | None = None) -> dict:
    if profile is not None and spec_path is not None:
        raise InputError("pass either a profile name or a world spec file, not both")
    if profile is not None:
        spec = get_profile(profile)
    elif spec_path is not None:
        spec = WorldSpec.load(spec_path)
    else:
        raise InputError("synth needs a profile name or a world spec file")
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    bundle = generate(spec)
    paths = write_bundle(bundle, out_dir)
    return {
        "paths": paths,
        "profile": spec.name,
        "seed": spec.seed,
        "hoi_classes": bundle.train.taxonomy.num_hoi,
        "train_images": len(bundle.train.images),
        "test_images": len(bundle.test.images),
        "feature_records": len(bundle.store.records),
        "frequencies": bundle.frequencies,
    }


def _heldout_flags(num_hoi: int, heldout_list: list[int] | None,
                   heldout_frac: float | None, seed: int) -> tuple[bool, ...] | None:
    if heldout_list is not None and heldout_frac is not None:
        raise InputError("pass either explicit held-out classes or a fraction, not both")
    if heldout_list is not None:
        flags = [False] * num_hoi
        for h in heldout_list:
            if not 0 <= h < num_hoi:
                raise InputError(f"held-out class {h} out of range")
            flags[h] = True
        return tuple(flags)
    if heldout_frac is not None:
        if not 0.0 <= heldout_frac < 1.0:
            raise InputError("held-out fraction must lie in [0, 1)")
        count = int(round(heldout_frac * num_hoi))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x201d]))
        chosen = set(int(h) for h in rng.choice(num_hoi, size=count, replace=False))
        return tuple(h in chosen for h in range(num_hoi))
    return None


def run_build_memory(annotations_path: str, features_path: str, out_path: str,
                     config: RunConfig, heldout_list: list[int] | None = None,
                     heldout_frac: float | None = None) -> dict:
    annotations = load_annotations(annotations_path)
    flags = _heldout_flags(annotations.taxonomy.num_hoi, heldout_list, heldout_frac,
                           config.seed)
    if flags is not None:
        annotations = dataclasses.replace(
            annotations, taxonomy=annotations.taxonomy.with_heldout(flags))
    index = FeatureIndex(read_feature_store(features_path))
    memory = build_memory(annotations, index, config)
    write_memory(memory, out_path)
    return {
        "memory": str(out_path),
        "rows": memory.ic.rows,
        "verbs": memory.num_verbs,
        "shots": memory.shots,
        "heldout_classes": [h for h, f in enumerate(annotations.taxonomy.heldout_flags) if f],
    }


class _StoreFeatures:
    """Training-free query features, straight from the feature store."""

    def __init__(self, index: FeatureIndex):
        self.index = index

    def pair_queries(self, img, pairs):
        out = []
        for pair in pairs:
            f_h = self.index.box_feature(img.image_id, "human", pair.human.box)
            f_o = self.index.box_feature(img.image_id, "object", pair.object.box)
            f_u = self.index.box_feature(img.image_id, "union", pair.union)
            out.append((np.concatenate([f_h, f_o]), f_u, f_u))
        return out


class _EncoderFeatures:
    """Query features from the adapted encoder via ROI pooling."""

    def __init__(self, index: FeatureIndex, weights, adapters, config: RunConfig):
        self.index = index
        self.weights = weights
        self.adapters = adapters
        self.config = config
        self._class_embeddings: dict[int, np.ndarray] = {}

    def pair_queries(self, img, pairs):
        cfg = self.config
        # prior tokens mirror the training path: filtered detections, input order
        kept = filter_detections(list(img.detections), cfg)
        embeddings = {}
        for det in kept:
            if det.class_id not in self._class_embeddings:
                self._class_embeddings[det.class_id] = self.index.semantic_object(det.class_id)
            embeddings[det.class_id] = self._class_embeddings[det.class_id]
        priors = prior_matrix(featurize_priors(kept, img.width, img.height, embeddings),
                              cfg.embed_dim)
        grid = self.index.image_grid(img.image_id, cfg.channels, cfg.image_size, cfg.image_size)
        tape = nk.Tape()
        enc = encode(tape, grid, priors, self.weights, self.adapters, cfg)
        out = []
        for pair in pairs:
            f_ic, f_ia, f_u = extract_pair_features(tape, enc, pair, cfg)
            out.append((f_ic.data[0], f_ia.data[0], f_u.data[0]))
        return out


def _score_image(img, taxonomy, memory: ConceptMemory, provider, config: RunConfig,
                 lam: float):
    kept = filter_detections(list(img.detections), config)
    pairs = enumerate_pairs(kept, taxonomy, img.image_id)
    if not pairs:
        return []
    suppressed = []
    for pair, (f_ic, f_ia, f_u) in zip(pairs, provider.pair_queries(img, pairs)):
        raw = score_pair(memory, f_ic, f_ia, f_u, object_class=pair.object.class_id)
        suppressed.append(suppress(raw, pair.human.score, pair.object.score, lam))
    return predictions_to_triplets(pairs, suppressed, taxonomy)


def infer_triplets(annotations: DatasetAnnotations, memory: ConceptMemory, provider,
                   config: RunConfig, lam: float | None = None):
    lam = config.lambda_infer if lam is None else lam
    images = sorted(annotations.images, key=lambda im: im.image_id)
    taxonomy = annotations.taxonomy
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(
                lambda img: _score_image(img, taxonomy, memory, provider, config, lam),
                images))
    else:
        results = [_score_image(img, taxonomy, memory, provider, config, lam)
                   for img in images]
    return [t for chunk in results for t in chunk]


def run_infer(annotations_path: str, features_path: str, memory_path: str, out_path: str,
              config: RunConfig, checkpoint_path: str | None = None,
              images_path: str | None = None, lam: float | None = None) -> dict:
    annotations = load_annotations(annotations_path)
    index = FeatureIndex(read_feature_store(features_path))
    memory = read_memory(memory_path)

    if checkpoint_path is not None:
        adapters, keys_ic, keys_ia, ckpt_config, _ = load_checkpoint(checkpoint_path)
        run_cfg = ckpt_config.replace(threads=config.threads)
        memory = dataclasses.replace(
            memory,
            ic=MemoryBranch(keys_ic, memory.ic.labels, list(memory.ic.provenance)),
            ia=MemoryBranch(keys_ia, memory.ia.labels, list(memory.ia.provenance)),
        )
        if images_path is None:
            images_path = str(Path(features_path).parent / "images.acfb")
        image_index = FeatureIndex(read_feature_store(images_path))
        # box/semantic lookups stay on the crop store, grids on the image store
        merged = _MergedIndex(index, image_index)
        weights = init_encoder_weights(run_cfg, seed=run_cfg.seed)
        provider = _EncoderFeatures(merged, weights, adapters, run_cfg)
        config_used = run_cfg
    else:
        provider = _StoreFeatures(index)
        config_used = config

    triplets = infer_triplets(annotations, memory, provider, config_used, lam=lam)
    write_predictions(triplets, out_path)
    return {"predictions": str(out_path), "triplets": len(triplets),
            "lambda": config_used.lambda_infer if lam is None else lam,
            "mode": "finetuned" if checkpoint_path else "training-free"}


class _MergedIndex:
    """Crop/semantic lookups from one store, image grids from another."""

    def __init__(self, crop_index: FeatureIndex, image_index: FeatureIndex):
        self._crops = crop_index
        self._images = image_index

    def box_feature(self, *args, **kwargs):
        return self._crops.box_feature(*args, **kwargs)

    def semantic_verb(self, verb):
        return self._crops.semantic_verb(verb)

    def semantic_object(self, object_class):
        return self._crops.semantic_object(object_class)

    def semantic_hoi(self, hoi):
        return self._crops.semantic_hoi(hoi)

    def image_grid(self, *args, **kwargs):
        return self._images.image_grid(*args, **kwargs)

    @property
    def dim(self):
        return self._crops.dim


def _report_summary(report: EvalReport) -> dict:
    return {
        "map_full": report.map_full,
        "map_rare": report.map_rare,
        "map_nonrare": report.map_nonrare,
        "map_seen": report.map_seen,
        "map_unseen": report.map_unseen,
    }


def run_eval(annotations_path: str, predictions_path: str, out_prefix: str,
             config: RunConfig) -> dict:
    annotations = load_annotations(annotations_path)
    triplets = read_predictions(predictions_path)
    report = evaluate(annotations, triplets, threads=config.threads)
    json_path = Path(str(out_prefix) + ".json")
    csv_path = Path(str(out_prefix) + ".csv")
    write_report(report, annotations.taxonomy, json_path, csv_path)
    summary = _report_summary(report)
    summary.update({"report_json": str(json_path), "report_csv": str(csv_path)})
    return summary


def run_finetune(annotations_path: str, features_path: str, memory_path: str,
                 out_path: str, config: RunConfig,
                 images_path: str | None = None) -> dict:
    annotations = load_annotations(annotations_path)
    index = FeatureIndex(read_feature_store(features_path))
    if images_path is None:
        images_path = str(Path(features_path).parent / "images.acfb")
    image_index = FeatureIndex(read_feature_store(images_path))
    memory = read_memory(memory_path)
    state = finetune(annotations, _MergedIndex(index, image_index), memory, config)
    save_checkpoint(state, out_path)
    return {
        "checkpoint": str(out_path),
        "epochs": state.epoch,
        "loss_history": state.loss_history,
        "trainable_values": state.trainable.num_values(),
    }


def run_gradcheck(config: RunConfig, eps: float = 1e-5, max_images: int = 1) -> dict:
    """Finite-difference check of the full loss on a tiny world, in float64."""
    spec = get_profile("toy")
    bundle = generate(dataclasses.replace(spec, seed=config.seed))
    index = _bundle_index(bundle)
    memory = build_memory(bundle.train, index, config.replace(memory_shots=2))
    trainer = Trainer(bundle.train, index, memory, config, dtype=np.float64)

    images = [img for img in bundle.train.images if trainer._prepare_image(img)]
    if not images:
        raise InputError("gradcheck world produced no scoreable images")
    images = images[:max_images]

    def loss_fn(params: nk.ParamSet) -> float:
        tape = nk.Tape()
        loss = trainer.batch_loss(tape, images)
        tape.backward(loss)
        return loss.item()

    worst = nk.finite_diff_check(loss_fn, trainer.state.trainable, eps=eps)
    return {
        "max_relative_error": worst,
        "parameters_checked": trainer.state.trainable.num_values(),
        "images": len(images),
        "passed": bool(worst <= 1e-4),
    }


def _bundle_index(bundle) -> _MergedIndex:
    return _MergedIndex(FeatureIndex(bundle.store), FeatureIndex(bundle.images))


def run_sweep(axis: str, values: list, out_csv: str, config: RunConfig,
              profile: str | None = None, seeds: int = 1,
              annotations_path: str | None = None, test_annotations_path: str | None = None,
              features_path: str | None = None) -> dict:
    """Vary one axis (shots | gammas | lambda), report mAP per setting.

    Worlds come either from a named profile (regenerated per seed) or from
    explicit annotation/feature paths; mAPs are averaged over seeds.
    """
    if axis not in ("shots", "gammas", "lambda"):
        raise InputError(f"sweep axis must be shots, gammas or lambda, got {axis!r}")
    if not values:
        raise InputError("sweep needs at least one value")

    worlds = []
    if profile is not None:
        base = get_profile(profile)
        for s in range(seeds):
            bundle = generate(dataclasses.replace(base, seed=base.seed + s))
            worlds.append((bundle.train, bundle.test, _bundle_index(bundle)))
    else:
        if not (annotations_path and test_annotations_path and features_path):
            raise InputError("sweep needs a profile or train/test annotations plus features")
        train = load_annotations(annotations_path)
        test = load_annotations(test_annotations_path)
        index = FeatureIndex(read_feature_store(features_path))
        worlds.append((train, test, index))

    rows = []
    for value in values:
        full, rare, nonrare = [], [], []
        for train, test, index in worlds:
            cfg = config
            lam = None
            if axis == "shots":
                cfg = config.replace(memory_shots=int(value))
            elif axis == "gammas":
                g = tuple(float(x) for x in value)
                if len(g) != 3:
                    raise InputError("each gammas setting needs three weights")
                cfg = config.replace(gamma_ic=g[0], gamma_ia=g[1], gamma_t=g[2])
            else:
                lam = float(value)
            memory = build_memory(train, index, cfg)
            triplets = infer_triplets(test, memory, _StoreFeatures(index), cfg, lam=lam)
            report = evaluate(test, triplets, threads=cfg.threads)
            full.append(report.map_full)
            rare.append(report.map_rare)
            nonrare.append(report.map_nonrare)

        def agg(values_):
            vals = [v for v in values_ if v is not None]
            return float(np.mean(vals)) if vals else None

        setting = ",".join(f"{g:g}" for g in value) if axis == "gammas" else f"{value:g}"
        rows.append({"setting": setting, "map_full": agg(full), "map_rare": agg(rare),
                     "map_nonrare": agg(nonrare)})

    lines = ["setting,map_full,map_rare,map_nonrare"]
    for row in rows:
        setting = row["setting"]
        if "," in setting:
            setting = f'"{setting}"'
        lines.append(",".join([
            setting,
            *("" if row[k] is None else repr(row[k])
              for k in ("map_full", "map_rare", "map_nonrare")),
        ]))
    out = Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"axis": axis, "rows": rows, "csv": str(out)}
