"""Differentiable operations on :class:`~beef.tensor.Tensor`.

Every op checks shapes explicitly.  Elementwise binary ops require identical
shapes; there is no implicit broadcasting (use :func:`broadcast_to`).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_output

__all__ = [
    "add", "sub", "mul", "scale", "add_scalar", "matmul", "bmm", "linear_map", "einsum",
    "mode_n_product", "sum", "mean", "reshape", "transpose", "concat", "stack",
    "index", "take_rows", "broadcast_to", "relu", "sigmoid", "tanh", "exp", "log",
    "clamped_log", "softmax", "log_softmax", "square", "conv3d", "detach",
    "mse", "constant",
]


def constant(data, like: Tensor | None = None) -> Tensor:
    """Wrap an array as a tensor that never requires grad."""
    dtype = like.dtype if like is not None else None
    return Tensor(data, dtype=dtype)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_output(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_output(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_output(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return make_output(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_output(a.data + c, (a,), lambda g: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_output(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for rank-1/rank-2 operands."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: ranks must be 1 or 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ in {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # (m,n) @ (n,)
            return np.outer(g, bd), ad.T @ g
        return bd @ g, np.outer(ad, g)  # (n,) @ (n,k)

    return make_output(ad @ bd, (a, b), vjp, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(B, n, k) @ (B, k, m) -> (B, n, m)``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return np.matmul(g, bd.transpose(0, 2, 1)), np.matmul(ad.transpose(0, 2, 1), g)

    return make_output(np.matmul(ad, bd), (a, b), vjp, "bmm")


def linear_map(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = W x (+ b)``; ``x`` may be a vector or a batch of row vectors."""
    if weight.ndim != 2:
        raise ShapeError(f"linear_map: weight must be rank 2, got {weight.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear_map: input {x.shape} incompatible with weight {weight.shape}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear_map: bias {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = g @ wd
        gw = np.outer(g, xd) if xd.ndim == 1 else g.T @ xd
        if bias is None:
            return gx, gw
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    return make_output(out, inputs, vjp, "linear_map")


def _parse_einsum(subscripts: str, n: int) -> tuple[list[str], str]:
    if "->" not in subscripts or "." in subscripts:
        raise ValueError(f"einsum: explicit '->' without ellipsis required: {subscripts!r}")
    lhs, out = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n:
        raise ValueError(f"einsum: {len(ins)} subscripts for {n} operands")
    for s in ins + [out]:
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated index in {s!r} is not supported")
    return ins, out


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Differentiable ``numpy.einsum`` without diagonals or ellipses."""
    ins, out_sub = _parse_einsum(subscripts, len(operands))
    sizes: dict[str, int] = {}
    for s, t in zip(ins, operands):
        if len(s) != t.ndim:
            raise ShapeError(f"einsum: subscript {s!r} for operand of shape {t.shape}")
        for c, d in zip(s, t.shape):
            if sizes.setdefault(c, d) != d:
                raise ShapeError(f"einsum: index {c!r} has sizes {sizes[c]} and {d}")
    arrays = [t.data for t in operands]
    result = np.einsum(subscripts, *arrays, optimize=len(arrays) > 2)

    def vjp(g):
        grads = []
        for i, t in enumerate(operands):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [ins[j] for j in range(len(ins)) if j != i]
            other_arrays = [arrays[j] for j in range(len(ins)) if j != i]
            avail = set(out_sub).union(*map(set, others)) if others else set(out_sub)
            target = ins[i]
            kept = "".join(c for c in target if c in avail)
            subscripts = ",".join([out_sub] + others) + "->" + kept
            gi = np.einsum(subscripts, g, *other_arrays, optimize=len(other_arrays) > 1)
            if kept != target:
                shape = [sizes[c] if c in kept else 1 for c in target]
                gi = np.broadcast_to(gi.reshape(shape), tuple(sizes[c] for c in target)).copy()
            grads.append(gi)
        return grads

    return make_output(np.asarray(result), tuple(operands), vjp, f"einsum({subscripts})")


def mode_n_product(core: Tensor, vec: Tensor, mode: int) -> Tensor:
    """Contract ``core`` with ``vec`` along dimension ``mode`` (1-based)."""
    if vec.ndim != 1:
        raise ShapeError(f"mode_n_product: vec must be rank 1, got {vec.shape}")
    if not 1 <= mode <= core.ndim:
        raise ShapeError(f"mode_n_product: mode {mode} invalid for core of shape {core.shape}")
    if core.shape[mode - 1] != vec.shape[0]:
        raise ShapeError(
            f"mode_n_product: core shape {core.shape} mode {mode} vs vec shape {vec.shape}"
        )
    letters = "abcdefgh"[: core.ndim]
    c = letters[mode - 1]
    out = letters.replace(c, "")
    return einsum(f"{letters},{c}->{out}", core, vec)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def vjp(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).copy(),)

    return make_output(np.asarray(a.data.sum(axis=axes)), (a,), vjp, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes) if axes else 1
    return scale(sum(a, axes), 1.0 / count)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size or any(s < 1 for s in shape):
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    orig = a.shape
    return make_output(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return make_output(
        np.ascontiguousarray(a.data.transpose(axes)), (a,),
        lambda g: (g.transpose(inv),), "transpose",
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_output(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors or any(t.shape != tensors[0].shape for t in tensors):
        raise ShapeError(f"stack: shapes differ {[t.shape for t in tensors]}")
    ax = axis % (tensors[0].ndim + 1)

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return make_output(np.stack([t.data for t in tensors], axis=ax), tensors, vjp, "stack")


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; the gradient scatter-adds."""
    shape = a.shape
    dtype = a.dtype
    out = np.asarray(a.data[key])
    if out.size == 0:
        raise ShapeError(f"index: empty selection {key!r} from {shape}")

    basic = not any(isinstance(k, (list, np.ndarray)) for k in (key if isinstance(key, tuple) else (key,)))

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return make_output(out.copy(), (a,), vjp, "index")


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of a rank-2 table."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take_rows: ids out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return make_output(table.data[ids].copy(), (table,), vjp, "take_rows")


def broadcast_to(a: Tensor, shape: Sequence[int], axis: int) -> Tensor:
    """Explicitly repeat ``a`` along a new axis inserted at ``axis``."""
    shape = tuple(shape)
    expected = shape[:axis] + shape[axis + 1:]
    if a.shape != expected:
        raise ShapeError(f"broadcast_to: {a.shape} cannot expand to {shape} at axis {axis}")
    out = np.broadcast_to(np.expand_dims(a.data, axis), shape).copy()
    return make_output(out, (a,), lambda g: (g.sum(axis=axis),), "broadcast_to")


# Callables notified with every ReLU input; used to keep finite-difference
# probes away from the kink at zero.
relu_observers: list = []


def relu(a: Tensor) -> Tensor:
    for observe in relu_observers:
        observe(a.data)
    mask = a.data > 0
    return make_output(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return make_output(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_output(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return make_output(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise ValueError("log: non-positive input")
    x = a.data
    return make_output(np.log(x), (a,), lambda g: (g / x,), "log")


def clamped_log(a: Tensor, floor: float = 1e-12) -> tuple[Tensor, bool]:
    """``log(max(a, floor))``; returns the result and whether clamping fired."""
    x = a.data
    low = x < floor
    safe = np.where(low, floor, x)
    out = make_output(np.log(safe), (a,), lambda g: (np.where(low, 0.0, g / safe),), "clamped_log")
    return out, bool(low.any())


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Max-subtracted softmax of ``x / temperature`` along ``axis``.

    For temperatures below 1e-6 the limit (one-hot at the argmax, first index
    on ties) is returned and no gradient flows.
    """
    if not temperature > 0:
        raise ValueError(f"softmax: temperature must be > 0, got {temperature}")
    if temperature < 1e-6:
        d = x.data
        idx = np.argmax(d, axis=axis)
        one_hot = np.zeros_like(d)
        np.put_along_axis(one_hot, np.expand_dims(idx, axis), 1.0, axis=axis)
        return make_output(one_hot, (x,), lambda g: (np.zeros_like(g),), "softmax(argmax)")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner) / temperature,)

    return make_output(p, (x,), vjp, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_output(out, (x,), vjp, "log_softmax")


def detach(a: Tensor) -> Tensor:
    return Tensor._wrap(a.data.view(), requires_grad=False)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    _same_shape(pred, target, "mse")
    return mean(square(sub(pred, target)))


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    if k > n + 2 * pad:
        raise ShapeError(f"kernel {k} larger than padded input {n} + 2*{pad}")
    return (n + 2 * pad - k) // stride + 1


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: Sequence[int] = (1, 1, 1),
    padding: Sequence[int] = (0, 0, 0),
) -> Tensor:
    """Channel-last 3-D cross-correlation.

    x: (N, T, H, W, Cin); weight: (kt, kh, kw, Cin, Cout); bias: (Cout,).
    Output spatial sizes follow ``floor((n + 2p - k) / s) + 1``.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d: expected rank-5 input and weight, got {x.shape}, {weight.shape}")
    n, t, h, w, cin = x.shape
    kt, kh, kw, wcin, cout = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv3d: input channels {cin} != weight channels {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias {bias.shape} != ({cout},)")
    st, sh, sw = stride
    pt, ph, pw = padding
    to = conv_output_size(t, kt, st, pt)
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0))) if (pt or ph or pw) else xd
    win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))
    win = win[:, : (to - 1) * st + 1 : st, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    # win: (N, To, Ho, Wo, Cin, kt, kh, kw)
    out = np.tensordot(win, wd, axes=([5, 6, 7, 4], [0, 1, 2, 3]))
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gw = np.tensordot(win, g, axes=([0, 1, 2, 3], [0, 1, 2, 3]))  # (Cin, kt, kh, kw, Cout)
        gw = gw.transpose(1, 2, 3, 0, 4)
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        gxp[:, a : a + st * to : st, b : b + sh * ho : sh, c : c + sw * wo : sw] += (
                            g @ wd[a, b, c].T
                        )
            gx = gxp[:, pt : pt + t, ph : ph + h, pw : pw + w]
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2, 3))

    return make_output(out, inputs, vjp, "conv3d")
