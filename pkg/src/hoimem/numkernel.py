"""Minimal dense-tensor math with hand-written backward passes.

Forward operations are recorded on an explicit :class:`Tape`; nothing is
global.  Recording only happens when an input requires gradients, so the
same code path serves gradient-free inference at no extra cost.  Default
precision is float32; gradient checking runs everything in float64.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense array plus an optional same-shape gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data if dtype is None else np.asarray(data, dtype=dtype))


class Tape:
    """Recorded forward operations for one reverse-mode backward pass."""

    def __init__(self):
        self._ops: list[tuple[Tensor, list]] = []
        self._tracked: set[int] = set()

    def _live(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, out: Tensor, pairs: list) -> Tensor:
        pairs = [(t, fn) for t, fn in pairs if self._live(t)]
        if pairs:
            self._tracked.add(id(out))
            self._ops.append((out, pairs))
        return out

    def backward(self, out: Tensor) -> None:
        """Accumulate d(out)/d(leaf) into every reachable leaf's ``grad``.

        Calling twice without zeroing doubles the leaf gradients.
        """
        if out.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {out.data.shape}")
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node, pairs in reversed(self._ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for t, fn in pairs:
                contribution = fn(g)
                if t.requires_grad:
                    t.grad += contribution
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = contribution if prev is None else prev + contribution

    # --- primitives -----------------------------------------------------

    @staticmethod
    def _check_same_dtype(op: str, *tensors: Tensor) -> None:
        dtypes = {t.data.dtype for t in tensors}
        if len(dtypes) > 1:
            raise ValueError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ValueError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
        self._check_same_dtype("matmul", a, b)
        out = Tensor(a.data @ b.data)
        return self._record(out, [
            (a, lambda g, bd=b.data: g @ bd.T),
            (b, lambda g, ad=a.data: ad.T @ g),
        ])

    def transpose(self, a: Tensor) -> Tensor:
        out = Tensor(a.data.T.copy())
        return self._record(out, [(a, lambda g: g.T)])

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum; ``b`` may be a row vector broadcast over 2-D ``a``."""
        self._check_same_dtype("add", a, b)
        if a.data.shape == b.data.shape:
            out = Tensor(a.data + b.data)
            return self._record(out, [(a, lambda g: g), (b, lambda g: g)])
        if a.data.ndim == 2 and b.data.shape == (a.data.shape[1],):
            out = Tensor(a.data + b.data)
            return self._record(out, [(a, lambda g: g), (b, lambda g: g.sum(axis=0))])
        raise ValueError(f"add: incompatible shapes {a.data.shape} + {b.data.shape}")

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ValueError(f"sub: incompatible shapes {a.data.shape} - {b.data.shape}")
        self._check_same_dtype("sub", a, b)
        out = Tensor(a.data - b.data)
        return self._record(out, [(a, lambda g: g), (b, lambda g: -g)])

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ValueError(f"mul: incompatible shapes {a.data.shape} * {b.data.shape}")
        self._check_same_dtype("mul", a, b)
        out = Tensor(a.data * b.data)
        return self._record(out, [
            (a, lambda g, bd=b.data: g * bd),
            (b, lambda g, ad=a.data: g * ad),
        ])

    def affine(self, a: Tensor, scale: float = 1.0, shift: float = 0.0) -> Tensor:
        """``scale * a + shift`` with python-float coefficients."""
        out = Tensor(a.data * a.data.dtype.type(scale) + a.data.dtype.type(shift))
        return self._record(out, [(a, lambda g: g * a.data.dtype.type(scale))])

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self.affine(a, scale=factor)

    def concat(self, tensors: list[Tensor], axis: int = -1) -> Tensor:
        arrays = [t.data for t in tensors]
        self._check_same_dtype("concat", *tensors)
        out = Tensor(np.concatenate(arrays, axis=axis))
        sizes = [arr.shape[axis] for arr in arrays]
        offsets = np.cumsum([0] + sizes)
        pairs = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            def vjp(g, start=start, stop=stop):
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                return g[tuple(index)]
            pairs.append((t, vjp))
        return self._record(out, pairs)

    def narrow(self, a: Tensor, axis: int, start: int, length: int) -> Tensor:
        index = [slice(None)] * a.data.ndim
        index[axis] = slice(start, start + length)
        out = Tensor(a.data[tuple(index)].copy())

        def vjp(g):
            full = np.zeros_like(a.data)
            full[tuple(index)] = g
            return full

        return self._record(out, [(a, vjp)])

    def sigmoid(self, a: Tensor) -> Tensor:
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-a.data))
        out = Tensor(s)
        return self._record(out, [(a, lambda g: g * s * (1.0 - s))])

    def gelu(self, a: Tensor) -> Tensor:
        x = a.data
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        out = Tensor(x * cdf)

        def vjp(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            return g * (cdf + x * pdf)

        return self._record(out, [(a, vjp)])

    def softmax(self, a: Tensor) -> Tensor:
        """Softmax over the last axis."""
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
        out = Tensor(y)

        def vjp(g):
            inner = (g * y).sum(axis=-1, keepdims=True)
            return y * (g - inner)

        return self._record(out, [(a, vjp)])

    def layernorm(self, a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
        """Normalize the last axis to zero mean / unit variance, then scale and shift."""
        width = a.data.shape[-1]
        if gain.data.shape != (width,) or bias.data.shape != (width,):
            raise ValueError(
                f"layernorm: gain/bias shapes {gain.data.shape}/{bias.data.shape} "
                f"do not match width {width}")
        self._check_same_dtype("layernorm", a, gain, bias)
        mu = a.data.mean(axis=-1, keepdims=True)
        var = a.data.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
        xhat = (a.data - mu) * inv
        out = Tensor(xhat * gain.data + bias.data)

        def vjp_a(g):
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            return term * inv

        lead = tuple(range(a.data.ndim - 1))
        return self._record(out, [
            (a, vjp_a),
            (gain, lambda g: (g * xhat).sum(axis=lead)),
            (bias, lambda g: g.sum(axis=lead)),
        ])

    def mean(self, a: Tensor, axis: int | None = None) -> Tensor:
        if axis is None:
            out = Tensor(a.data.mean())
            n = a.data.size
            return self._record(out, [(a, lambda g: np.full_like(a.data, g / n))])
        out = Tensor(a.data.mean(axis=axis))
        n = a.data.shape[axis]

        def vjp(g):
            return np.repeat(np.expand_dims(g, axis) / n, n, axis=axis)

        return self._record(out, [(a, vjp)])

    def l2_normalize(self, a: Tensor) -> Tensor:
        """Unit-normalize the last axis; all-zero slices stay zero with zero gradient."""
        norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
        safe = np.where(norms == 0.0, 1.0, norms)
        y = a.data / safe
        out = Tensor(y)

        def vjp(g):
            inner = (g * y).sum(axis=-1, keepdims=True)
            dx = (g - y * inner) / safe
            return np.where(norms == 0.0, 0.0, dx)

        return self._record(out, [(a, vjp)])

    def log(self, a: Tensor) -> Tensor:
        with np.errstate(divide="ignore"):
            out = Tensor(np.log(a.data))

        def vjp(g):
            with np.errstate(divide="ignore"):
                return g / a.data

        return self._record(out, [(a, vjp)])

    def power(self, a: Tensor, exponent: float) -> Tensor:
        out = Tensor(np.power(a.data, a.data.dtype.type(exponent)))

        def vjp(g):
            return g * exponent * np.power(a.data, a.data.dtype.type(exponent - 1.0))

        return self._record(out, [(a, vjp)])

    def clip(self, a: Tensor, lo: float, hi: float) -> Tensor:
        """Clamp with pass-through gradient strictly inside the interval."""
        clipped = np.clip(a.data, lo, hi)
        out = Tensor(clipped)
        inside = (a.data > lo) & (a.data < hi)
        return self._record(out, [(a, lambda g: g * inside)])

    def linear(self, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
        y = self.matmul(x, w)
        return y if b is None else self.add(y, b)


class ParamSet:
    """Named trainable tensors plus per-parameter AdamW moment state."""

    def __init__(self, params: dict[str, Tensor]):
        for name, p in params.items():
            if not p.requires_grad:
                raise ValueError(f"parameter {name} does not require gradients")
        self.params = dict(params)
        self.moment1 = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.moment2 = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def __iter__(self):
        return iter(self.params.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_values(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def merged(self, other: "ParamSet") -> "ParamSet":
        overlap = set(self.params) & set(other.params)
        if overlap:
            raise ValueError(f"parameter names collide: {sorted(overlap)}")
        return ParamSet({**self.params, **other.params})


def adamw_step(params: ParamSet, *, lr: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Decoupled-weight-decay Adam with bias-corrected moments."""
    params.step_count += 1
    t = params.step_count
    b1, b2 = betas
    for name, p in params.params.items():
        g = p.grad
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter '{name}'")
        m = params.moment1[name]
        v = params.moment2[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def finite_diff_check(f, params: ParamSet, eps: float = 1e-5) -> float:
    """Compare analytic gradients against central differences, coordinate by coordinate.

    ``f(params)`` must run a full forward and backward pass, leaving analytic
    gradients in the parameters and returning the scalar loss.  Returns the
    maximum over coordinates of ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params.zero_grad()
    base = float(f(params))
    if not math.isfinite(base):
        raise FloatingPointError(f"loss is not finite: {base}")
    analytic = {name: p.grad.copy() for name, p in params.params.items()}

    worst = 0.0
    for name, p in params.params.items():
        flat = p.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + eps
            f_plus = float(f(params))
            flat[idx] = original - eps
            f_minus = float(f(params))
            flat[idx] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError(f"loss not finite while perturbing '{name}'[{idx}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(grad_flat[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    params.zero_grad()
    return worst
