"""Run configuration: score fusion, detector filtering, optimizer, encoder dims."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

from hoimem.errors import InputError


@dataclass
class RunConfig:
    """All tunables of the pipeline with their default values.

    ``lambda_train`` / ``lambda_infer`` are the exponents applied to the
    product of detector confidences when suppressing interaction scores.
    ``gamma_*`` weigh the three memory branches (instance-centric,
    interaction-aware, semantic).  Encoder dims default to desk scale.
    """

    # score fusion / suppression
    lambda_train: float = 1.0
    lambda_infer: float = 2.8
    gamma_ic: float = 0.5
    gamma_ia: float = 0.5
    gamma_t: float = 1.0
    # memory
    memory_shots: int = 16
    memory_sampling: str = "order"  # "order": dataset order; "uniform": seeded shuffle
    normalize_keys: bool = True
    temperature: float | None = None  # None = identity, no affinity sharpening
    semantic_rows: str = "verb"  # "verb": one classifier row per verb; "hoi": one per class
    # detector filtering
    min_score: float = 0.2
    top_k_per_class: int = 15
    # optimizer
    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 15
    batch_size: int = 8
    max_pairs_per_image: int = 64
    # focal loss
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # encoder dims (toy scale)
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    width: int = 32          # token width d
    adapter_width: int = 8   # bottleneck d', must stay below d
    heads: int = 2           # self-attention heads
    adapter_heads: int = 2   # cross-attention heads inside the adapter
    blocks: int = 2
    embed_dim: int = 16      # output feature width d_e
    roi_output: int = 3      # pooled grid P (7 at full scale, 3 at toy scale)
    roi_sampling: int = 2
    # misc
    seed: int = 0
    threads: int = 1

    def validate(self) -> "RunConfig":
        for name in ("lambda_train", "lambda_infer", "gamma_ic", "gamma_ia", "gamma_t",
                     "lr", "weight_decay", "focal_alpha", "focal_gamma", "min_score"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise InputError(f"config field {name} must be finite, got {value!r}")
        if self.lambda_train < 0 or self.lambda_infer < 0:
            raise InputError("suppression exponents must be >= 0")
        if self.memory_shots < 1:
            raise InputError(f"memory_shots must be >= 1, got {self.memory_shots}")
        if self.adapter_width >= self.width:
            raise InputError(
                f"adapter_width ({self.adapter_width}) must be smaller than width ({self.width})")
        if self.image_size % self.patch_size != 0:
            raise InputError("image_size must be a multiple of patch_size")
        if self.adapter_width % self.adapter_heads != 0:
            raise InputError("adapter_heads must divide adapter_width")
        if self.width % self.heads != 0:
            raise InputError("heads must divide width")
        if self.semantic_rows not in ("verb", "hoi"):
            raise InputError(f"semantic_rows must be 'verb' or 'hoi', got {self.semantic_rows!r}")
        if self.memory_sampling not in ("order", "uniform"):
            raise InputError(
                f"memory_sampling must be 'order' or 'uniform', got {self.memory_sampling!r}")
        if self.threads < 1:
            raise InputError("threads must be >= 1")
        return self

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs).validate()

    @property
    def gammas(self) -> tuple[float, float, float]:
        return (self.gamma_ic, self.gamma_ia, self.gamma_t)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config fields: {sorted(unknown)}")
        if "betas" in data:
            data = dict(data)
            data["betas"] = tuple(data["betas"])
        return cls(**data).validate()

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "RunConfig":
        """Read a JSON config file and apply keyword overrides on top."""
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
        data.update(overrides)
        return cls.from_dict(data)


def resolve_config(config_path: str | Path | None = None, **overrides) -> RunConfig:
    """Defaults, optionally overridden by a JSON file, then by keyword args."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if config_path is not None:
        return RunConfig.load(config_path, **overrides)
    return RunConfig.from_dict(overrides) if overrides else RunConfig().validate()
