"""Encoder and detector backends.

Model identifiers select the implementation: ``hashed/<name>[@dim]`` is a
fully offline, deterministic stand-in (seeded random projections and a
brightness-blob detector) used for tests and dry runs; anything else is
treated as a Hugging Face model id and loaded through ``transformers``,
which requires the optional ``models`` extra and cached weights.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

from featx.errors import FeatxError


def _seed_from(name: str, extra: str = "") -> np.random.Generator:
    digest = hashlib.blake2b(f"{name}|{extra}".encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


class HashedEncoder:
    """Deterministic image/text embeddings: seeded projections, unit norm."""

    THUMB = 16  # images are pooled to THUMB x THUMB x 3 before projection

    def __init__(self, name: str, dim: int = 32):
        self.name = name
        self.dim = dim
        rng = _seed_from(name, "projection")
        self._projection = rng.standard_normal((dim, self.THUMB * self.THUMB * 3))

    def encode_images(self, crops: list[Image.Image]) -> np.ndarray:
        out = np.zeros((len(crops), self.dim), dtype=np.float32)
        for i, crop in enumerate(crops):
            thumb = crop.convert("RGB").resize((self.THUMB, self.THUMB), Image.BILINEAR)
            pixels = np.asarray(thumb, dtype=np.float64).reshape(-1) / 255.0
            vec = self._projection @ (pixels - pixels.mean())
            norm = np.linalg.norm(vec)
            out[i] = (vec / norm if norm > 0 else vec).astype(np.float32)
        return out

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        out = np.zeros((len(prompts), self.dim), dtype=np.float32)
        for i, prompt in enumerate(prompts):
            vec = _seed_from(self.name, f"text|{prompt}").standard_normal(self.dim)
            out[i] = (vec / np.linalg.norm(vec)).astype(np.float32)
        return out


class BlobDetector:
    """Offline detector: bright connected components on a downsampled grid.

    Class ids hash each blob's mean color into the object vocabulary, which
    keeps assignments stable across runs.
    """

    GRID = 32

    def __init__(self, name: str, num_classes: int, min_area: int = 2,
                 threshold: float = 0.15):
        self.name = name
        self.num_classes = num_classes
        self.min_area = min_area
        self.threshold = threshold

    def detect(self, image: Image.Image) -> list[dict]:
        rgb = image.convert("RGB").resize((self.GRID, self.GRID), Image.BILINEAR)
        pixels = np.asarray(rgb, dtype=np.float64) / 255.0
        gray = pixels.mean(axis=2)
        mask = gray > gray.mean() + self.threshold
        labels = self._components(mask)
        width, height = image.size
        sx, sy = width / self.GRID, height / self.GRID
        detections = []
        for blob in range(1, labels.max() + 1):
            ys, xs = np.nonzero(labels == blob)
            if len(ys) < self.min_area:
                continue
            box = [float(xs.min() * sx), float(ys.min() * sy),
                   float((xs.max() + 1) * sx), float((ys.max() + 1) * sy)]
            mean_color = pixels[ys, xs].mean(axis=0)
            bucket = int.from_bytes(hashlib.blake2b(
                np.round(mean_color, 1).tobytes(), digest_size=4).digest(), "little")
            fill = len(ys) / ((ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1))
            detections.append({
                "box": box,
                "score": round(0.5 + 0.5 * float(fill), 4),
                "class_id": bucket % self.num_classes,
            })
        detections.sort(key=lambda d: (d["box"][1], d["box"][0]))
        return detections

    @staticmethod
    def _components(mask: np.ndarray) -> np.ndarray:
        labels = np.zeros(mask.shape, dtype=np.int32)
        current = 0
        h, w = mask.shape
        for sy in range(h):
            for sx in range(w):
                if not mask[sy, sx] or labels[sy, sx]:
                    continue
                current += 1
                stack = [(sy, sx)]
                labels[sy, sx] = current
                while stack:
                    y, x = stack.pop()
                    for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                            labels[ny, nx] = current
                            stack.append((ny, nx))
        return labels


class TransformersEncoder:
    """CLIP-class image/text encoder via transformers; needs cached weights."""

    def __init__(self, model_id: str, device: str = "cpu", batch_size: int = 8):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise FeatxError(
                "encoder backend needs the optional 'models' extra "
                "(torch + transformers)") from exc
        try:
            self._model = CLIPModel.from_pretrained(model_id).to(device).eval()
            self._processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise FeatxError(f"cannot load encoder model {model_id!r}: {exc}") from exc
        self._torch = torch
        self.device = device
        self.batch_size = batch_size
        self.dim = int(self._model.config.projection_dim)

    def _batched(self, items):
        for i in range(0, len(items), self.batch_size):
            yield items[i:i + self.batch_size]

    def encode_images(self, crops) -> np.ndarray:
        chunks = []
        with self._torch.no_grad():
            for batch in self._batched(crops):
                inputs = self._processor(images=batch, return_tensors="pt").to(self.device)
                feats = self._model.get_image_features(**inputs)
                chunks.append(feats.cpu().numpy())
        out = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.dim))
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return (out / np.where(norms == 0, 1.0, norms)).astype(np.float32)

    def encode_texts(self, prompts) -> np.ndarray:
        chunks = []
        with self._torch.no_grad():
            for batch in self._batched(prompts):
                inputs = self._processor(text=batch, return_tensors="pt",
                                         padding=True).to(self.device)
                feats = self._model.get_text_features(**inputs)
                chunks.append(feats.cpu().numpy())
        out = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.dim))
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return (out / np.where(norms == 0, 1.0, norms)).astype(np.float32)


class TransformersDetector:
    """DETR-class detector via transformers; class names map into the vocabulary."""

    def __init__(self, model_id: str, object_names: list[str], device: str = "cpu",
                 min_score: float = 0.5):
        try:
            import torch
            from transformers import AutoImageProcessor, AutoModelForObjectDetection
        except ImportError as exc:
            raise FeatxError(
                "detector backend needs the optional 'models' extra "
                "(torch + transformers)") from exc
        try:
            self._model = AutoModelForObjectDetection.from_pretrained(model_id).to(device).eval()
            self._processor = AutoImageProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise FeatxError(f"cannot load detector model {model_id!r}: {exc}") from exc
        self._torch = torch
        self.device = device
        self.min_score = min_score
        self._name_to_class = {name.lower(): i for i, name in enumerate(object_names)}

    def detect(self, image: Image.Image) -> list[dict]:
        with self._torch.no_grad():
            inputs = self._processor(images=image, return_tensors="pt").to(self.device)
            outputs = self._model(**inputs)
            target = self._torch.tensor([image.size[::-1]])
            results = self._processor.post_process_object_detection(
                outputs, threshold=self.min_score, target_sizes=target)[0]
        detections = []
        id2label = self._model.config.id2label
        for score, label, box in zip(results["scores"], results["labels"], results["boxes"]):
            class_id = self._name_to_class.get(id2label[int(label)].lower())
            if class_id is None:
                continue  # detector label outside the target vocabulary
            detections.append({
                "box": [round(float(v), 4) for v in box.tolist()],
                "score": round(float(score), 4),
                "class_id": class_id,
            })
        detections.sort(key=lambda d: (d["box"][1], d["box"][0]))
        return detections


def make_encoder(model_id: str, device: str, batch_size: int):
    if model_id.startswith("hashed/"):
        name, _, dim = model_id.partition("@")
        return HashedEncoder(name, dim=int(dim) if dim else 32)
    return TransformersEncoder(model_id, device=device, batch_size=batch_size)


def make_detector(model_id: str, object_names: list[str], device: str):
    if model_id.startswith("hashed/"):
        return BlobDetector(model_id, num_classes=len(object_names))
    return TransformersDetector(model_id, object_names, device=device)
