"""Dense NCHW tensor primitives with explicit backward rules.

Tensors are plain ``numpy.ndarray`` objects laid out as (batch, channel,
height, width).  Storage is float32 for training; every primitive computes in
the dtype of its inputs so the finite-difference harness can run the same code
in float64.

Each primitive returns its result together with whatever the matching
``*_backward`` function needs.  Backward functions take the upstream gradient
and return gradients for every differentiable input.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericalError

DTYPE = np.float32
EPS = 1e-6

_BINARY_KINDS = ("add", "sub", "mul")


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    """Return ``x`` as a contiguous rank-4 array of ``dtype``."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise DimensionError(f"expected a rank-4 (B, C, H, W) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
    return arr


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericalError(f"{where}: {bad} non-finite value(s)")
    return x


def _check_axis(x: np.ndarray, axis: int) -> int:
    if not 0 <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis


# elementwise --------------------------------------------------------------


def ew_binary(a: np.ndarray, b: np.ndarray, kind: str):
    """Elementwise ``add``/``sub``/``mul``; ``b`` may have a single channel."""
    if kind not in _BINARY_KINDS:
        raise ValueError(f"unknown kind {kind!r}, expected one of {_BINARY_KINDS}")
    if a.shape != b.shape:
        channel_bcast = (
            a.ndim == 4 and b.ndim == 4 and b.shape[1] == 1
            and (a.shape[0], a.shape[2], a.shape[3]) == (b.shape[0], b.shape[2], b.shape[3])
        )
        if not channel_bcast:
            raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}")
    if kind == "add":
        out = a + b
    elif kind == "sub":
        out = a - b
    else:
        out = a * b
    return out, (a, b, kind)


def ew_binary_backward(dout: np.ndarray, cache):
    a, b, kind = cache
    if kind == "add":
        da, db = dout, dout
    elif kind == "sub":
        da, db = dout, -dout
    else:
        da, db = dout * b, dout * a
    if db.shape != b.shape:
        db = db.sum(axis=1, keepdims=True)
    return da, db


# reductions ---------------------------------------------------------------


def reduce_max(x: np.ndarray, axis: int):
    """Maximum along ``axis`` (kept as extent 1) and the winning index.

    Ties resolve to the lowest index, so the backward pass is deterministic.
    """
    _check_axis(x, axis)
    arg = np.argmax(x, axis=axis)
    arg = np.expand_dims(arg, axis)
    values = np.take_along_axis(x, arg, axis=axis)
    return values, arg


def reduce_max_backward(dout: np.ndarray, arg: np.ndarray, shape, axis: int) -> np.ndarray:
    dx = np.zeros(shape, dtype=dout.dtype)
    np.put_along_axis(dx, arg, dout, axis=axis)
    return dx


def l2_normalize(x: np.ndarray, axis: int, eps: float = EPS):
    """Scale each fiber along ``axis`` to unit Euclidean norm.

    Fibers whose norm is below ``eps`` are divided by ``eps`` instead.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _check_axis(x, axis)
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x / denom
    return y, (y, denom, norm >= eps, axis)


def l2_normalize_backward(dy: np.ndarray, cache) -> np.ndarray:
    y, denom, active, axis = cache
    # Jacobian of x/|x| is (I - y y^T)/|x|; the eps floor is a plain scale.
    proj = np.sum(dy * y, axis=axis, keepdims=True)
    return np.where(active, dy - y * proj, dy) / denom


# spatial matmul -----------------------------------------------------------


def to_tokens(x: np.ndarray) -> np.ndarray:
    """(B, d, H, W) -> (B, H*W, d), token index = h*W + w."""
    b, d, h, w = x.shape
    return x.reshape(b, d, h * w).transpose(0, 2, 1)


def from_tokens(t: np.ndarray, h: int, w: int) -> np.ndarray:
    b, n, d = t.shape
    if n != h * w:
        raise DimensionError(f"{n} tokens cannot form a {h}x{w} grid")
    return np.ascontiguousarray(t.transpose(0, 2, 1)).reshape(b, d, h, w)


def matmul_spatial(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Per-batch score grid ``q_tokens @ k_tokens^T`` of shape (B, Nq, Nk)."""
    if q.shape[0] != k.shape[0] or q.shape[1] != k.shape[1]:
        raise DimensionError(
            f"matmul_spatial needs equal batch and feature extents, got {q.shape} and {k.shape}"
        )
    return np.matmul(to_tokens(q), to_tokens(k).transpose(0, 2, 1))


def matmul_spatial_backward(dscores: np.ndarray, q: np.ndarray, k: np.ndarray):
    qt, kt = to_tokens(q), to_tokens(k)
    dq = np.matmul(dscores, kt)
    dk = np.matmul(dscores.transpose(0, 2, 1), qt)
    return from_tokens(dq, q.shape[2], q.shape[3]), from_tokens(dk, k.shape[2], k.shape[3])


# layout -------------------------------------------------------------------
#
# A rank-5 (B, n, C', H, W) quantity is stored as rank-4 (B, n*C', H, W) with
# channel index g*C' + c for group g and in-group channel c.


def group_channels(x: np.ndarray, n: int) -> np.ndarray:
    b, c, h, w = x.shape
    if c % n:
        raise DimensionError(f"{c} channels cannot be split into {n} groups")
    return x.reshape(b, n, c // n, h, w)


def ungroup_channels(x: np.ndarray) -> np.ndarray:
    b, n, cg, h, w = x.shape
    return x.reshape(b, n * cg, h, w)


def reshape(x: np.ndarray, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return x.reshape(shape), x.shape


def reshape_backward(dout: np.ndarray, orig_shape) -> np.ndarray:
    return dout.reshape(orig_shape)


def permute(x: np.ndarray, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"{axes} is not a permutation of {x.ndim} axes")
    return np.ascontiguousarray(x.transpose(axes)), axes


def permute_backward(dout: np.ndarray, axes) -> np.ndarray:
    return np.ascontiguousarray(dout.transpose(np.argsort(axes)))


def concat(xs, axis: int = 1):
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise DimensionError(
                f"cannot concatenate {[t.shape for t in xs]} along axis {axis}"
            )
    sizes = [x.shape[axis] for x in xs]
    return np.concatenate(xs, axis=axis), (sizes, axis)


def concat_backward(dout: np.ndarray, cache):
    sizes, axis = cache
    return np.split(dout, np.cumsum(sizes)[:-1], axis=axis)


def slice_axis(x: np.ndarray, axis: int, start: int, stop: int):
    _check_axis(x, axis)
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return x[tuple(index)], (x.shape, axis, start, stop)


def slice_axis_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, axis, start, stop = cache
    dx = np.zeros(shape, dtype=dout.dtype)
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, stop)
    dx[tuple(index)] = dout
    return dx
