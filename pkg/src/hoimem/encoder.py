"""Frozen patch-transformer encoder with residual instance-aware adapters.

The transformer weights are fixed (random at desk scale, replaceable from a
weights file); only the adapter blocks are trainable.  Each adapter sits at
the start of its block, cross-attending from down-projected tokens to prior
tokens built from the image's detections, and feeds back through a
zero-initialized up-projection so a fresh model reproduces the frozen
encoder exactly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from hoimem import numkernel as nk
from hoimem.config import RunConfig
from hoimem.errors import InputError
from hoimem.pairing import HumanObjectPair
from hoimem.storage import read_named_matrices, write_named_matrices

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class PriorToken:
    """Per-detection prior: normalized geometry, confidence, class text embedding."""

    box_feats: np.ndarray  # [x1/W, y1/H, x2/W, y2/H, cx/W, cy/H, w/W, h/H]
    score: float
    text_embedding: np.ndarray


def featurize_priors(detections, image_width: int, image_height: int,
                     class_embeddings: dict[int, np.ndarray]) -> list[PriorToken]:
    """One prior token per detection, detection order preserved."""
    tokens = []
    for det in detections:
        emb = class_embeddings.get(det.class_id)
        if emb is None:
            raise InputError(f"no text embedding for object class {det.class_id}")
        x1, y1, x2, y2 = det.box
        w, h = x2 - x1, y2 - y1
        geom = np.array([
            x1 / image_width, y1 / image_height, x2 / image_width, y2 / image_height,
            (x1 + x2) / 2 / image_width, (y1 + y2) / 2 / image_height,
            w / image_width, h / image_height,
        ], dtype=np.float64)
        tokens.append(PriorToken(geom, det.score, np.asarray(emb)))
    return tokens


def prior_matrix(tokens: list[PriorToken], embed_dim: int, dtype=np.float32) -> np.ndarray:
    """Stack prior tokens into an (N_t, 8 + 1 + d_e) matrix."""
    if not tokens:
        return np.zeros((0, 9 + embed_dim), dtype=dtype)
    rows = [np.concatenate([t.box_feats, [t.score], t.text_embedding]) for t in tokens]
    return np.stack(rows).astype(dtype)


@dataclass
class AdapterBlock:
    """Down-project, cross-attend to prior tokens, up-project (zero at init)."""

    w_down: nk.Tensor
    prior_w1: nk.Tensor
    prior_b1: nk.Tensor
    prior_w2: nk.Tensor
    prior_b2: nk.Tensor
    wq: nk.Tensor
    wk: nk.Tensor
    wv: nk.Tensor
    wo: nk.Tensor
    w_up: nk.Tensor
    heads: int

    def named(self, prefix: str) -> dict[str, nk.Tensor]:
        return {f"{prefix}.{field}": getattr(self, field)
                for field in ("w_down", "prior_w1", "prior_b1", "prior_w2", "prior_b2",
                              "wq", "wk", "wv", "wo", "w_up")}


def init_adapter_blocks(config: RunConfig, seed: int, dtype=np.float32,
                        trainable: bool = True) -> list[AdapterBlock]:
    d, dp, de = config.width, config.adapter_width, config.embed_dim
    if dp % config.adapter_heads != 0:
        raise InputError(f"adapter heads ({config.adapter_heads}) must divide width {dp}")
    blocks = []
    make = nk.parameter if trainable else (lambda a, dtype: nk.Tensor(np.asarray(a, dtype=dtype)))
    for i in range(config.blocks):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xada, i]))

        def init(fan_in, shape, rng=rng):
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

        blocks.append(AdapterBlock(
            w_down=make(init(d, (d, dp)), dtype=dtype),
            prior_w1=make(init(9 + de, (9 + de, dp)), dtype=dtype),
            prior_b1=make(np.zeros(dp), dtype=dtype),
            prior_w2=make(init(dp, (dp, dp)), dtype=dtype),
            prior_b2=make(np.zeros(dp), dtype=dtype),
            wq=make(init(dp, (dp, dp)), dtype=dtype),
            wk=make(init(dp, (dp, dp)), dtype=dtype),
            wv=make(init(dp, (dp, dp)), dtype=dtype),
            wo=make(init(dp, (dp, dp)), dtype=dtype),
            w_up=make(np.zeros((dp, d)), dtype=dtype),
            heads=config.adapter_heads,
        ))
    return blocks


def adapter_param_set(blocks: list[AdapterBlock]) -> nk.ParamSet:
    named: dict[str, nk.Tensor] = {}
    for i, block in enumerate(blocks):
        named.update(block.named(f"adapter{i}"))
    return nk.ParamSet(named)


def _multihead_attention(tape: nk.Tape, q: nk.Tensor, k: nk.Tensor, v: nk.Tensor,
                         heads: int) -> nk.Tensor:
    """Scaled dot-product attention, heads split along the feature axis."""
    width = q.shape[-1]
    if width % heads != 0:
        raise InputError(f"head count {heads} does not divide width {width}")
    head_dim = width // heads
    scale = 1.0 / math.sqrt(head_dim)
    outputs = []
    for h in range(heads):
        qh = tape.narrow(q, 1, h * head_dim, head_dim)
        kh = tape.narrow(k, 1, h * head_dim, head_dim)
        vh = tape.narrow(v, 1, h * head_dim, head_dim)
        logits = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale)
        weights = tape.softmax(logits)
        outputs.append(tape.matmul(weights, vh))
    return tape.concat(outputs, axis=-1)


def adapter_forward(tape: nk.Tape, x: nk.Tensor, priors: np.ndarray | None,
                    block: AdapterBlock) -> nk.Tensor:
    """Residual update from cross-attention onto prior tokens.

    With no prior tokens the update is skipped entirely, and with the
    up-projection still at zero the output equals the input bitwise.
    """
    if priors is None or priors.shape[0] == 0:
        return x
    p = nk.Tensor(np.asarray(priors, dtype=x.data.dtype))
    hidden = tape.linear(tape.gelu(tape.linear(p, block.prior_w1, block.prior_b1)),
                         block.prior_w2, block.prior_b2)
    q = tape.matmul(x, block.w_down)
    attended = _multihead_attention(
        tape,
        tape.matmul(q, block.wq),
        tape.matmul(hidden, block.wk),
        tape.matmul(hidden, block.wv),
        block.heads,
    )
    update = tape.matmul(tape.matmul(attended, block.wo), block.w_up)
    return tape.add(x, update)


# --- frozen transformer -----------------------------------------------------


def init_encoder_weights(config: RunConfig, seed: int, dtype=np.float32) -> dict[str, nk.Tensor]:
    d = config.width
    patch_in = config.channels * config.patch_size ** 2
    tokens = (config.image_size // config.patch_size) ** 2
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xe4c]))

    def init(fan_in, shape):
        return nk.Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape).astype(dtype))

    weights = {
        "patch_w": init(patch_in, (patch_in, d)),
        "patch_b": nk.Tensor(np.zeros(d, dtype=dtype)),
        "pos": nk.Tensor((0.02 * rng.standard_normal((tokens, d))).astype(dtype)),
        "proj": init(d, (d, config.embed_dim)),
    }
    hidden = 2 * d
    for i in range(config.blocks):
        weights[f"block{i}.ln1.gain"] = nk.Tensor(np.ones(d, dtype=dtype))
        weights[f"block{i}.ln1.bias"] = nk.Tensor(np.zeros(d, dtype=dtype))
        weights[f"block{i}.ln2.gain"] = nk.Tensor(np.ones(d, dtype=dtype))
        weights[f"block{i}.ln2.bias"] = nk.Tensor(np.zeros(d, dtype=dtype))
        for name in ("wq", "wk", "wv", "wo"):
            weights[f"block{i}.attn.{name}"] = init(d, (d, d))
        weights[f"block{i}.mlp.w1"] = init(d, (d, hidden))
        weights[f"block{i}.mlp.b1"] = nk.Tensor(np.zeros(hidden, dtype=dtype))
        weights[f"block{i}.mlp.w2"] = init(hidden, (hidden, d))
        weights[f"block{i}.mlp.b2"] = nk.Tensor(np.zeros(d, dtype=dtype))
    return weights


def save_encoder_weights(weights: dict[str, nk.Tensor], path, config: RunConfig) -> None:
    write_named_matrices({name: t.data for name, t in weights.items()}, path,
                         extra_meta={"kind": "encoder-weights",
                                     "dims": {"width": config.width,
                                              "embed_dim": config.embed_dim,
                                              "patch_size": config.patch_size,
                                              "image_size": config.image_size,
                                              "channels": config.channels,
                                              "blocks": config.blocks}})


def load_encoder_weights(path, config: RunConfig, dtype=np.float32) -> dict[str, nk.Tensor]:
    named, _ = read_named_matrices(path)
    reference = init_encoder_weights(config, seed=0, dtype=dtype)
    missing = set(reference) - set(named)
    if missing:
        raise InputError(f"weights file lacks parameters: {sorted(missing)[:5]}")
    out = {}
    for name, ref in reference.items():
        arr = np.asarray(named[name], dtype=dtype)
        if arr.shape != ref.data.shape:
            # 1-D parameters round-trip as single-row matrices
            if arr.size == ref.data.size:
                arr = arr.reshape(ref.data.shape)
            else:
                raise InputError(
                    f"weights file: {name} has shape {arr.shape}, expected {ref.data.shape}")
        out[name] = nk.Tensor(arr)
    return out


@dataclass
class EncodedImage:
    """Block-output tokens plus everything ROI pooling needs."""

    tokens: nk.Tensor  # (grid_h * grid_w) x d
    grid_h: int
    grid_w: int
    patch_size: int
    image_size: int
    proj: nk.Tensor    # d x d_e
    pooled: nk.Tensor  # 1 x d_e, unit norm


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(C, H, W) image to (num_patches, C*patch*patch) rows, row-major grid order."""
    c, h, w = image.shape
    gh, gw = h // patch, w // patch
    tiles = image.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return tiles.reshape(gh * gw, c * patch * patch)


def encode(tape: nk.Tape, image: np.ndarray, priors: np.ndarray | None,
           weights: dict[str, nk.Tensor], adapters: list[AdapterBlock] | None,
           config: RunConfig) -> EncodedImage:
    """Patchify, embed, run adapter+attention+MLP blocks, return the token grid."""
    dtype = weights["patch_w"].data.dtype
    expected = (config.channels, config.image_size, config.image_size)
    if image.shape != expected:
        raise InputError(f"image grid shape {image.shape} does not match config {expected}")
    grid = config.image_size // config.patch_size

    patches = nk.Tensor(patchify(np.asarray(image, dtype=dtype), config.patch_size))
    x = tape.add(tape.linear(patches, weights["patch_w"], weights["patch_b"]), weights["pos"])
    for i in range(config.blocks):
        if adapters is not None:
            x = adapter_forward(tape, x, priors, adapters[i])
        h = tape.layernorm(x, weights[f"block{i}.ln1.gain"], weights[f"block{i}.ln1.bias"])
        attn = _multihead_attention(
            tape,
            tape.matmul(h, weights[f"block{i}.attn.wq"]),
            tape.matmul(h, weights[f"block{i}.attn.wk"]),
            tape.matmul(h, weights[f"block{i}.attn.wv"]),
            config.heads,
        )
        x = tape.add(x, tape.matmul(attn, weights[f"block{i}.attn.wo"]))
        h = tape.layernorm(x, weights[f"block{i}.ln2.gain"], weights[f"block{i}.ln2.bias"])
        mlp = tape.linear(tape.gelu(tape.linear(h, weights[f"block{i}.mlp.w1"],
                                                weights[f"block{i}.mlp.b1"])),
                          weights[f"block{i}.mlp.w2"], weights[f"block{i}.mlp.b2"])
        x = tape.add(x, mlp)

    mean_row = nk.Tensor(np.full((1, grid * grid), 1.0 / (grid * grid), dtype=dtype))
    pooled = tape.l2_normalize(tape.matmul(tape.matmul(mean_row, x), weights["proj"]))
    return EncodedImage(tokens=x, grid_h=grid, grid_w=grid, patch_size=config.patch_size,
                        image_size=config.image_size, proj=weights["proj"], pooled=pooled)


# --- ROI pooling ------------------------------------------------------------


def _bilinear_accumulate(grid: np.ndarray, y: float, x: float, value: float) -> None:
    gh, gw = grid.shape
    y = min(max(y, 0.0), gh - 1.0)
    x = min(max(x, 0.0), gw - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    if y0 >= gh - 1:
        y0, y1, ly = gh - 1, gh - 1, 0.0
    else:
        y1, ly = y0 + 1, y - y0
    if x0 >= gw - 1:
        x0, x1, lx = gw - 1, gw - 1, 0.0
    else:
        x1, lx = x0 + 1, x - x0
    grid[y0, x0] += value * (1 - ly) * (1 - lx)
    grid[y0, x1] += value * (1 - ly) * lx
    grid[y1, x0] += value * ly * (1 - lx)
    grid[y1, x1] += value * ly * lx


def roi_pool_weights(box: Box, grid_h: int, grid_w: int, patch: int,
                     output_size: int, sampling: int, dtype=np.float32) -> np.ndarray:
    """Constant pooling weights over the token grid for one box.

    Bilinear samples ``sampling**2`` points per output cell, averages the
    cells, so the result is a convex combination of token positions.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    if (x2 - x1) * (y2 - y1) < 1.0:
        warnings.warn(f"degenerate roi box {box}; clamping to 1 px")
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        x1, x2 = cx - 0.5, cx + 0.5
        y1, y2 = cy - 0.5, cy + 0.5
    gx1, gy1, gx2, gy2 = x1 / patch, y1 / patch, x2 / patch, y2 / patch
    cell_w = (gx2 - gx1) / output_size
    cell_h = (gy2 - gy1) / output_size
    grid = np.zeros((grid_h, grid_w), dtype=np.float64)
    share = 1.0 / (output_size * output_size * sampling * sampling)
    for ci in range(output_size):
        for cj in range(output_size):
            for sy in range(sampling):
                for sx in range(sampling):
                    y = gy1 + (ci + (sy + 0.5) / sampling) * cell_h
                    x = gx1 + (cj + (sx + 0.5) / sampling) * cell_w
                    _bilinear_accumulate(grid, y - 0.5, x - 0.5, share)
    return grid.reshape(1, grid_h * grid_w).astype(dtype)


def roi_align_rows(tape: nk.Tape, enc: EncodedImage, boxes: list[Box],
                   config: RunConfig) -> nk.Tensor:
    """Pooled, projected, unit-norm features for several boxes at once (B x d_e)."""
    dtype = enc.tokens.data.dtype
    rows = np.concatenate([
        roi_pool_weights(box, enc.grid_h, enc.grid_w, enc.patch_size,
                         config.roi_output, config.roi_sampling, dtype=dtype)
        for box in boxes
    ], axis=0)
    pooled = tape.matmul(nk.Tensor(rows), enc.tokens)
    return tape.l2_normalize(tape.matmul(pooled, enc.proj))


def roi_align(tape: nk.Tape, enc: EncodedImage, box: Box, config: RunConfig) -> nk.Tensor:
    return roi_align_rows(tape, enc, [box], config)


def extract_pair_features(tape: nk.Tape, enc: EncodedImage, pair: HumanObjectPair,
                          config: RunConfig) -> tuple[nk.Tensor, nk.Tensor, nk.Tensor]:
    """Instance-centric, interaction-aware and union queries for one pair.

    The union query backs both the interaction branch and the semantic
    branch, so the last two results are the same tensor.
    """
    rows = roi_align_rows(tape, enc, [pair.human.box, pair.object.box, pair.union], config)
    f_h = tape.narrow(rows, 0, 0, 1)
    f_o = tape.narrow(rows, 0, 1, 1)
    f_u = tape.narrow(rows, 0, 2, 1)
    f_ic = tape.concat([f_h, f_o], axis=-1)
    return f_ic, f_u, f_u
