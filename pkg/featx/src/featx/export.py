"""Run the detector and encoder over an image folder, write pipeline files."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from featx.backends import make_detector, make_encoder
from featx.errors import FeatxError
from featx.formats import (FeatureWriter, box_key, load_taxonomy_doc, record_id,
                           write_annotations)

log = logging.getLogger("featx")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass
class ExportJob:
    image_dir: str
    taxonomy: str               # taxonomy (or full annotation) JSON fixing the vocabulary
    out_annotations: str
    out_features: str
    encoder: str = "hashed/clip-stand-in@32"
    detector: str = "hashed/detr-stand-in"
    prompts: str | None = None  # text file, one prompt per verb (from `hoimem prompts`)
    batch_size: int = 8
    device: str = "cpu"
    min_score: float = 0.2


def _square_pad_crop(image: Image.Image, box) -> Image.Image:
    """Crop the box, pad to a square canvas so the encoder sees the full crop."""
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(max(x2, x1 + 1), image.width), min(max(y2, y1 + 1), image.height)
    crop = image.crop((x1, y1, x2, y2))
    side = max(crop.width, crop.height)
    canvas = Image.new("RGB", (side, side))
    canvas.paste(crop, ((side - crop.width) // 2, (side - crop.height) // 2))
    return canvas


def _union(a, b):
    return [min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3])]


def _read_prompts(job: ExportJob, verbs: list[str]) -> list[str]:
    if job.prompts is None:
        return [f"A photo of a person is {verb} an object" for verb in verbs]
    try:
        lines = Path(job.prompts).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FeatxError(f"cannot read prompts file {job.prompts}: {exc}") from exc
    prompts = [line for line in lines if line.strip()]
    if len(prompts) != len(verbs):
        raise FeatxError(
            f"prompts file has {len(prompts)} lines for {len(verbs)} verbs")
    return prompts


def export(job: ExportJob) -> dict:
    """Detections into the annotation document, crops and prompts into the store.

    Returns a summary with the written paths and record counts.  Undecodable
    images are skipped with a log line.
    """
    taxonomy = load_taxonomy_doc(Path(job.taxonomy))
    human_class = int(taxonomy["human_class"])
    prompts = _read_prompts(job, list(taxonomy["verbs"]))

    encoder = make_encoder(job.encoder, device=job.device, batch_size=job.batch_size)
    detector = make_detector(job.detector, list(taxonomy["objects"]), device=job.device)
    writer = FeatureWriter(dim=encoder.dim)

    image_dir = Path(job.image_dir)
    if not image_dir.is_dir():
        raise FeatxError(f"image folder {image_dir} does not exist")
    files = sorted(p for p in image_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)

    if files:
        # prompts ride along with the images they describe; an empty folder
        # exports a header-only store
        text_vectors = encoder.encode_texts(prompts)
        for verb_index, vector in enumerate(text_vectors):
            writer.add(record_id("semantic", "verb", verb_index), vector,
                       {"image_id": -1, "role": "semantic", "verb_index": verb_index,
                        "prompt": prompts[verb_index]})
        object_vectors = encoder.encode_texts(
            [f"A photo of a {name}" for name in taxonomy["objects"]])
        for object_index, vector in enumerate(object_vectors):
            writer.add(record_id("semantic", "object", object_index), vector,
                       {"image_id": -1, "role": "semantic", "object_index": object_index})

    images_doc = []
    skipped = 0
    for image_id, path in enumerate(files):
        try:
            with Image.open(path) as raw:
                image = raw.convert("RGB")
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping undecodable image %s: %s", path.name, exc)
            skipped += 1
            continue

        detections = [d for d in detector.detect(image) if d["score"] >= job.min_score]
        crops, metas = [], []

        def queue(role: str, box) -> None:
            key = box_key(box)
            crops.append(_square_pad_crop(image, box))
            metas.append({"image_id": image_id, "role": role, "box": key})

        for det in detections:
            queue("human" if det["class_id"] == human_class else "object", det["box"])
        for hi, human in enumerate(detections):
            if human["class_id"] != human_class:
                continue
            for oi, other in enumerate(detections):
                if oi == hi:
                    continue
                queue("union", _union(human["box"], other["box"]))

        if crops:
            vectors = encoder.encode_images(crops)
            for meta, vector in zip(metas, vectors):
                writer.add(record_id(meta["image_id"], meta["role"],
                                     tuple(meta["box"])), vector, meta)

        images_doc.append({
            "image_id": image_id,
            "file": path.name,
            "width": image.width,
            "height": image.height,
            "gt_pairs": [],
            "detections": [{"box": box_key(d["box"]), "score": d["score"],
                            "class_id": d["class_id"]} for d in detections],
        })

    write_annotations(taxonomy, images_doc, Path(job.out_annotations))
    writer.write(Path(job.out_features))
    return {
        "annotations": str(job.out_annotations),
        "features": str(job.out_features),
        "images": len(images_doc),
        "skipped": skipped,
        "records": len(writer.records),
        "dim": writer.dim,
    }
