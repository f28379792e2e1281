"""Reverse-mode differentiable numerics over numpy arrays.

A deliberately small op set: exactly what the forecasting network needs,
each op with an analytic backward that is validated against central finite
differences (``grad_check``). Values are plain numpy arrays; fp32 is the
training dtype, fp64 the gradient-checking dtype. The softmax / layernorm /
GELU inner loops dispatch to the kernel backend in ``_kernels``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .errors import (
    HeadDivisibility,
    NonFiniteInput,
    RateOutOfRange,
    ShapeMismatch,
)

ROLE_PARAMETER = "parameter"
ROLE_INPUT = "input"
ROLE_INTERMEDIATE = "intermediate"


class Tensor:
    """A node in the reverse-mode graph: a value plus a gradient obligation."""

    __slots__ = ("value", "grad", "role", "requires_grad", "name", "_parents", "_backprop")

    def __init__(self, value, *, role=ROLE_INTERMEDIATE, requires_grad=False,
                 parents=(), backprop=None, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.role = role
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backprop = backprop

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}, role={self.role})"


def parameter(value, name=None):
    """Wrap an array as a trainable leaf."""
    return Tensor(np.asarray(value), role=ROLE_PARAMETER, requires_grad=True, name=name)


def leaf_input(value, requires_grad=False, name=None):
    """Wrap an array as a network input (differentiable on request)."""
    return Tensor(np.asarray(value), role=ROLE_INPUT, requires_grad=requires_grad, name=name)


def constant(value, dtype=None):
    v = np.asarray(value, dtype=dtype)
    return Tensor(v, role=ROLE_INPUT, requires_grad=False)


def _coerce(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.value.dtype if like is not None else None
    return constant(x, dtype=dtype)


def _node(value, parents, backprop):
    tracked = any(p.requires_grad for p in parents)
    return Tensor(value, role=ROLE_INTERMEDIATE, requires_grad=tracked,
                  parents=tuple(parents), backprop=backprop if tracked else None)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(out):
    """Reverse pass from a scalar output; accumulates into ``grad`` fields."""
    if out.value.size != 1:
        raise ShapeMismatch(f"backward needs a scalar output, got shape {out.value.shape}")
    order = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    out.grad = np.ones_like(out.value)
    for node in reversed(order):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)


# -- elementwise and structural ops -------------------------------------------


def add(a, b):
    a = _coerce(a)
    b = _coerce(b, like=a)
    val = a.value + b.value

    def bp(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.value.shape))

    return _node(val, (a, b), bp)


def sub(a, b):
    a = _coerce(a)
    b = _coerce(b, like=a)
    val = a.value - b.value

    def bp(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.value.shape))

    return _node(val, (a, b), bp)


def mul(a, b):
    a = _coerce(a)
    b = _coerce(b, like=a)
    val = a.value * b.value

    def bp(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.value, b.value.shape))

    return _node(val, (a, b), bp)


def scale(a, c):
    c = float(c)
    val = a.value * c

    def bp(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _node(val, (a,), bp)


def square(a):
    val = a.value * a.value

    def bp(g):
        if a.requires_grad:
            a.accumulate_grad(g * (2.0 * a.value))

    return _node(val, (a,), bp)


def matmul(a, b):
    a = _coerce(a)
    b = _coerce(b, like=a)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeMismatch("matmul operands must have ndim >= 2")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeMismatch(
            f"matmul inner dims disagree: {a.value.shape} @ {b.value.shape}")
    val = a.value @ b.value

    def bp(g):
        if a.requires_grad:
            ga = g @ b.value.swapaxes(-1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.value.shape))
        if b.requires_grad:
            gb = a.value.swapaxes(-1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.value.shape))

    return _node(val, (a, b), bp)


def reshape(a, shape):
    val = a.value.reshape(shape)

    def bp(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.value.shape))

    return _node(val, (a,), bp)


def permute(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    val = a.value.transpose(axes)

    def bp(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return _node(val, (a,), bp)


def concat(parts: Sequence[Tensor], axis: int):
    parts = [_coerce(p) for p in parts]
    val = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate_grad(g[tuple(idx)])

    return _node(val, tuple(parts), bp)


def stack(parts: Sequence[Tensor], axis: int):
    parts = [_coerce(p) for p in parts]
    val = np.stack([p.value for p in parts], axis=axis)

    def bp(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p.accumulate_grad(np.take(g, i, axis=axis))

    return _node(val, tuple(parts), bp)


def split(a, sections: int, axis: int):
    """Contiguous equal split; concatenating the parts restores the input."""
    size = a.value.shape[axis]
    if size % sections:
        raise ShapeMismatch(f"axis of size {size} not divisible into {sections} parts")
    step = size // sections
    out = []
    for i in range(sections):
        idx = [slice(None)] * a.value.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        idx = tuple(idx)
        val = a.value[idx]

        def bp(g, idx=idx):
            if a.requires_grad:
                if a.grad is None:
                    a.grad = np.zeros_like(a.value)
                a.grad[idx] += g

        out.append(_node(val, (a,), bp))
    return out


def take_rows(a, indices):
    """Gather rows along axis 0; backward scatter-adds."""
    idx = np.asarray(indices)
    val = a.value[idx]

    def bp(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.value)
            np.add.at(a.grad, idx, g)

    return _node(val, (a,), bp)


def sum_(a, axis=None, keepdims=False):
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def bp(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.value.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(gg, a.value.shape))

    return _node(val, (a,), bp)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.value.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- neural-net ops ------------------------------------------------------------


def linear(x, w, b=None):
    """y = x @ w + b over the last axis."""
    x = _coerce(x)
    if x.value.shape[-1] != w.value.shape[0]:
        raise ShapeMismatch(
            f"linear: input width {x.value.shape[-1]} != weight rows {w.value.shape[0]}")
    if b is not None and b.value.shape != (w.value.shape[1],):
        raise ShapeMismatch(
            f"linear: bias shape {b.value.shape} != ({w.value.shape[1]},)")
    val = x.value @ w.value
    if b is not None:
        val = val + b.value
    parents = (x, w) if b is None else (x, w, b)

    def bp(g):
        g2d = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x.accumulate_grad(g @ w.value.T)
        if w.requires_grad:
            x2d = x.value.reshape(-1, x.value.shape[-1])
            w.accumulate_grad(x2d.T @ g2d)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g2d.sum(axis=0))

    return _node(val, parents, bp)


def softmax(x, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    if not np.isfinite(x.value).all():
        raise NonFiniteInput("softmax received non-finite logits")
    xv = np.moveaxis(x.value, axis, -1)
    lead_shape = xv.shape
    x2d = np.ascontiguousarray(xv.reshape(-1, xv.shape[-1]))
    y2d = K.softmax_fwd(x2d)
    val = np.moveaxis(y2d.reshape(lead_shape), -1, axis)

    def bp(g):
        if x.requires_grad:
            gy = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(-1, lead_shape[-1]))
            gx2d = K.softmax_bwd(y2d, gy)
            x.accumulate_grad(np.moveaxis(gx2d.reshape(lead_shape), -1, axis))

    return _node(val, (x,), bp)


def layer_norm(x, gain, bias, eps=1e-6):
    """Zero-mean / unit-variance over the last axis, then affine."""
    d = x.value.shape[-1]
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gain/bias must have shape ({d},), got "
            f"{gain.value.shape} / {bias.value.shape}")
    x2d = np.ascontiguousarray(x.value.reshape(-1, d))
    y2d, xhat, rstd = K.layernorm_fwd(x2d, gain.value, bias.value, eps)
    val = y2d.reshape(x.value.shape)

    def bp(g):
        g2d = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggain, gbias = K.layernorm_bwd(xhat, rstd, gain.value, g2d)
        if x.requires_grad:
            x.accumulate_grad(gx.reshape(x.value.shape))
        if gain.requires_grad:
            gain.accumulate_grad(ggain)
        if bias.requires_grad:
            bias.accumulate_grad(gbias)

    return _node(val, (x, gain, bias), bp)


def gelu(x):
    """Exact erf-based GELU."""
    flat = np.ascontiguousarray(x.value.reshape(-1))
    val = K.gelu_fwd(flat).reshape(x.value.shape)

    def bp(g):
        if x.requires_grad:
            gx = K.gelu_bwd(flat, np.ascontiguousarray(g.reshape(-1)))
            x.accumulate_grad(gx.reshape(x.value.shape))

    return _node(val, (x,), bp)


def _check_rate(rate):
    if not (0.0 <= rate < 1.0):
        raise RateOutOfRange(f"rate must be in [0, 1), got {rate}")


def dropout(x, rate, mode="eval", rng=None):
    """Inverted dropout: identity in eval mode, 1/(1-rate) scaling in train."""
    _check_rate(rate)
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.value.shape) >= rate).astype(x.value.dtype)
    keep *= 1.0 / (1.0 - rate)
    val = x.value * keep

    def bp(g):
        if x.requires_grad:
            x.accumulate_grad(g * keep)

    return _node(val, (x,), bp)


def drop_path(x, rate, mode="eval", rng=None):
    """Stochastic depth: zeroes whole residual branches per leading-axis sample."""
    _check_rate(rate)
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode drop_path needs an rng")
    mask_shape = (x.value.shape[0],) + (1,) * (x.value.ndim - 1)
    keep = (rng.random(mask_shape) >= rate).astype(x.value.dtype)
    keep *= 1.0 / (1.0 - rate)
    val = x.value * keep

    def bp(g):
        if x.requires_grad:
            x.accumulate_grad(g * keep)

    return _node(val, (x,), bp)


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def multi_head_self_attention(x, p: AttentionParams, heads: int):
    """Scaled dot-product self-attention over the second-to-last axis.

    ``x`` is [..., n, d] with arbitrary leading batch axes; per-head scaling
    is 1/sqrt(d/heads) and the output projection is applied at the end.
    """
    d = x.value.shape[-1]
    if d % heads:
        raise HeadDivisibility(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    n = x.value.shape[-2]
    lead = x.value.shape[:-2]
    nl = len(lead)
    to_heads = tuple(range(nl)) + (nl + 1, nl, nl + 2)   # [..., n, h, dh] -> [..., h, n, dh]

    def split_heads(t):
        return permute(reshape(t, lead + (n, heads, dh)), to_heads)

    q = split_heads(linear(x, p.wq, p.bq))
    k = split_heads(linear(x, p.wk, p.bk))
    v = split_heads(linear(x, p.wv, p.bv))
    scores = scale(matmul(q, permute(k, tuple(range(nl)) + (nl, nl + 2, nl + 1))),
                   1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    ctx = reshape(permute(ctx, to_heads), lead + (n, d))
    return linear(ctx, p.wo, p.bo)


def cross_attention_single_query(q, keys, values, scale_factor=None):
    """Convex combination of value rows, attention driven by one query vector."""
    q = _coerce(q)
    keys = _coerce(keys)
    values = _coerce(values)
    d = q.value.shape[-1]
    if q.value.shape != (d,):
        raise ShapeMismatch(f"query must be a vector, got {q.value.shape}")
    if keys.value.ndim != 2 or keys.value.shape[1] != d:
        raise ShapeMismatch(f"keys must be [V, {d}], got {keys.value.shape}")
    if values.value.shape[0] != keys.value.shape[0]:
        raise ShapeMismatch("keys and values disagree on row count")
    if scale_factor is None:
        scale_factor = 1.0 / np.sqrt(d)
    logits = permute(matmul(keys, reshape(q, (d, 1))), (1, 0))   # [1, V]
    weights = softmax(scale(logits, scale_factor), axis=-1)
    return reshape(matmul(weights, values), (values.value.shape[1],))


def gelu_mlp(x, w1, b1, w2, b2):
    """Two linear layers with an exact GELU between."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# -- parameters ----------------------------------------------------------------


def truncated_normal(rng, shape, std, dtype, bound=2.0):
    """Normal(0, std) resampled until every draw is within ``bound`` sigmas."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)


class ParameterStore:
    """Named trainable leaves with deterministic creation order and init."""

    def __init__(self, seed: int, dtype=np.float32, init_std: float = 0.02):
        self._params: dict[str, Tensor] = {}
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self.dtype = np.dtype(dtype)
        self.init_std = init_std

    def add(self, name: str, shape, init: str = "trunc_normal") -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(shape)
        if init == "trunc_normal":
            value = truncated_normal(self._rng, shape, self.init_std, self.dtype)
        elif init == "zeros":
            value = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            value = np.ones(shape, dtype=self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = parameter(value, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return list(self._params.items())

    @property
    def total_count(self) -> int:
        return sum(t.value.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()

    def state_dict(self):
        return {name: t.value.copy() for name, t in self._params.items()}

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ShapeMismatch(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in self._params.items():
            arr = np.asarray(state[name], dtype=t.value.dtype)
            if arr.shape != t.value.shape:
                raise ShapeMismatch(
                    f"parameter {name!r}: shape {arr.shape} != {t.value.shape}")
            t.value = arr.copy()


# -- finite-difference verification ---------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: list
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
               tolerance: float = 1e-4, max_entries: int | None = None,
               rng=None) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    ``fn`` must be deterministic and return a scalar Tensor. Entries per input
    can be subsampled via ``max_entries`` for large leaves.
    """
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    backward(out)
    analytic = [t.grad.copy() for t in inputs]

    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))
    per_input = []
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.value.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = rng.choice(n, size=max_entries, replace=False)
        else:
            idxs = np.arange(n)
        a_flat = a.reshape(-1)
        max_err = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(*inputs).value)
            flat[i] = orig - eps
            f_minus = float(fn(*inputs).value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(numeric - a_flat[i]) / max(1.0, abs(a_flat[i]))
            if err > max_err:
                max_err = err
        per_input.append(GradCheckEntry(t.name or "<unnamed>", float(max_err), len(idxs)))
        worst = max(worst, max_err)
    return GradCheckReport(float(worst), per_input, tolerance)
