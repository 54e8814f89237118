"""Differentiable primitives.

Shapes are checked strictly: the only implicit broadcast is the row-wise bias
in :func:`add_bias`. Each op supplies a pure forward (used for graph replay)
and a backward rule mapping the output gradient to input gradients.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, record

IGNORE_INDEX = -1


def _require_same(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g), np.add)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g), np.subtract)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    nb = b.requires_grad
    return record("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=lead) if nb else None), np.add)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", (x,), x.data * c, lambda g: (g * c,), lambda a: a * c)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    _require_same("mul", a, b)
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad
    return record(
        "mul", (a, b), ad * bd, lambda g: (g * bd if na else None, g * ad if nb else None), np.multiply
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),), np.tanh)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return record("relu", (x,), np.maximum(xd, 0), lambda g: (g * (xd > 0),), lambda a: np.maximum(a, 0))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(a: np.ndarray) -> np.ndarray:
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a * a * a)))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    t = np.tanh(inner)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return record("gelu", (x,), 0.5 * xd * (1.0 + t), bw, _gelu)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record(
        "sum",
        (x,),
        np.asarray(x.data.sum(), dtype=x.data.dtype),
        lambda g: (np.broadcast_to(g, shape).copy(),),
        lambda a: np.asarray(a.sum(), dtype=a.dtype),
    )


# ---------------------------------------------------------------------------
# products
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., k] @ b[k, n] -> [..., n]; leading axes of ``a`` act as rows."""
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        ga = g @ bd.T if na else None
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if nb else None
        return ga, gb

    return record("matmul", (a, b), ad @ bd, bw, np.matmul)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x[..., d_in] @ w[d_out, d_in]^T -> [..., d_out] (weights stored output-major)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data

    nx, nw = x.requires_grad, w.requires_grad

    def bw(g):
        gx = g @ wd if nx else None
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1]) if nw else None
        return gx, gw

    return record("linear", (x, w), xd @ wd.T, bw, lambda a, b: a @ b.T)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over identical leading axes: [..., m, k] @ [..., k, n]."""
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2) if na else None, np.swapaxes(ad, -1, -2) @ g if nb else None)

    return record("bmm", (a, b), ad @ bd, bw, np.matmul)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return record("reshape", (x,), out, lambda g: (g.reshape(old),), lambda a: a.reshape(shape))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(
        "transpose",
        (x,),
        np.ascontiguousarray(x.data.transpose(axes)),
        lambda g: (g.transpose(inv),),
        lambda a: np.ascontiguousarray(a.transpose(axes)),
    )


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != xs[0].shape[:ax] + xs[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return record(
        "concat",
        xs,
        np.concatenate([t.data for t in xs], axis=ax),
        lambda g: tuple(np.split(g, splits, axis=ax)),
        lambda *arrs: np.concatenate(arrs, axis=ax),
    )


def prefix(x: Tensor, r: int, axis: int) -> Tensor:
    """First ``r`` entries along ``axis`` as a storage-sharing view.

    The gradient is scattered back into the leading block; the tail receives zeros.
    """
    ax = axis % x.ndim
    if not 0 < r <= x.shape[ax]:
        raise ShapeError(f"prefix: r={r} outside [1, {x.shape[ax]}] for shape {x.shape}")
    index = (slice(None),) * ax + (slice(0, r),)
    full = x.shape

    def bw(g):
        out = np.zeros(full, dtype=g.dtype)
        out[index] = g
        return (out,)

    return record("prefix", (x,), x.data[index], bw, lambda a: a[index])


# ---------------------------------------------------------------------------
# normalisation, attention, pooling
# ---------------------------------------------------------------------------


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = _softmax(x.data)
    return record("softmax", (x,), y, lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), _softmax)


def _layer_norm_parts(a: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    xc = a - a.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def _layer_norm(a: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    return _layer_norm_parts(a, eps)[0] * gamma + beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs width {d}")
    xhat, inv = _layer_norm_parts(x.data, eps)
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    nx, ng, nb = x.requires_grad, gamma.requires_grad, beta.requires_grad

    def bw(g):
        dx = None
        if nx:
            gx = g * gd
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead) if ng else None, g.sum(axis=lead) if nb else None

    return record(
        "layer_norm",
        (x, gamma, beta),
        xhat * gd + beta.data,
        bw,
        lambda a, gm, bt: _layer_norm(a, gm, bt, eps),
    )


def _causal_weights(q: np.ndarray, k: np.ndarray, factor: float) -> np.ndarray:
    t = q.shape[-2]
    s = (q @ np.swapaxes(k, -1, -2)) * factor
    s = np.where(np.tri(t, dtype=bool), s, -np.inf)
    return _softmax(s)


def causal_attention(q: Tensor, k: Tensor) -> Tensor:
    """Causally masked attention weights softmax(q k^T / sqrt(d)) over [..., T, d] inputs.

    Entries above the diagonal are exactly zero.
    """
    if q.shape != k.shape or q.ndim < 2:
        raise ShapeError(f"causal_attention: query {q.shape} and key {k.shape} must match")
    factor = 1.0 / math.sqrt(q.shape[-1])
    qd, kd = q.data, k.data
    p = _causal_weights(qd, kd, factor)

    nq, nk = q.requires_grad, k.requires_grad

    def bw(g):
        ds = p * (g - (g * p).sum(axis=-1, keepdims=True)) * factor
        return ds @ kd if nq else None, np.swapaxes(ds, -1, -2) @ qd if nk else None

    return record("causal_attention", (q, k), p, bw, lambda a, b: _causal_weights(a, b, factor))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` gathered by integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"embedding: id out of range [0, {n}) (min {ids.min()}, max {ids.max()})")
    tshape = table.shape

    def bw(g):
        out = np.zeros(tshape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, tshape[1]))
        return (out,)

    return record("embedding", (table,), table.data[ids], bw, lambda t: t[ids])


def mean_pool(h: Tensor, mask: np.ndarray) -> Tensor:
    """Mask-weighted mean over the token axis: [..., T, d] with mask [..., T] -> [..., d]."""
    m = np.asarray(mask, dtype=h.data.dtype)
    if m.shape != h.shape[:-1]:
        raise ShapeError(f"mean_pool: mask {m.shape} does not match tokens {h.shape[:-1]}")
    denom = m.sum(axis=-1, keepdims=True)
    if np.any(denom <= 0):
        raise ValueError("mean_pool: all-zero mask (no live tokens)")
    w = (m / denom)[..., None]

    def fwd(a):
        return (a * w).sum(axis=-2)

    return record("mean_pool", (h,), fwd(h.data), lambda g: (g[..., None, :] * w,), fwd)


def _log_softmax(a: np.ndarray) -> np.ndarray:
    s = a - a.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean over non-ignored rows of -log softmax(logits)[label].

    ``logits`` is [..., C]; ``labels`` has the leading shape. Positions equal to
    ``ignore_index`` contribute nothing.
    """
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    flat = labels.reshape(-1)
    live = flat != ignore_index
    count = int(live.sum())
    if count == 0:
        raise ValueError("cross_entropy: empty batch (no labelled positions)")
    if np.any((flat[live] < 0) | (flat[live] >= c)):
        raise ValueError(f"cross_entropy: label outside [0, {c})")
    rows = np.nonzero(live)[0]
    cols = flat[live]

    def fwd(a):
        lp = _log_softmax(a.reshape(-1, c))
        return np.asarray(-lp[rows, cols].sum() / count, dtype=a.dtype)

    x2 = logits.data.reshape(-1, c)
    lp = _log_softmax(x2)
    loss = np.asarray(-lp[rows, cols].sum() / count, dtype=x2.dtype)
    shape = logits.shape

    def bw(g):
        d = np.zeros_like(x2)
        d[rows] = np.exp(lp[rows])
        d[rows, cols] -= 1.0
        return ((d * (g / count)).reshape(shape),)

    return record("cross_entropy", (logits,), loss, bw, fwd)
