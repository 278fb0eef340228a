"""Convolutional network layers with hand-written forward and backward passes.

The module is split in two layers.  Functional kernels (``conv2d``,
``batchnorm2d``, ``maxpool2d``, ...) are stateless and return ``(out, cache)``
pairs.  ``Module`` subclasses own parameters, gradients and buffers, remember
the cache of their most recent forward call, and expose ``backward``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError
from .tensor import DTYPE

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def derive_seed(seed: int, name: str) -> int:
    """Stable per-layer seed so initialization does not depend on build order."""
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode("utf-8"))) % (2**32)


# padding ------------------------------------------------------------------


def pad2d(x: np.ndarray, pad: int, mode: str = "zero") -> np.ndarray:
    if pad == 0:
        return x
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zero":
        return np.pad(x, widths)
    if mode == "replicate":
        return np.pad(x, widths, mode="edge")
    raise ValueError(f"unknown padding mode {mode!r}")


def pad2d_backward(dxp: np.ndarray, pad: int, mode: str = "zero") -> np.ndarray:
    if pad == 0:
        return dxp
    if mode == "zero":
        return dxp[:, :, pad:-pad, pad:-pad]
    h = dxp.shape[2] - 2 * pad
    w = dxp.shape[3] - 2 * pad
    # Fold the replicated border rows/columns back onto the edge pixels.
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    tmp = np.zeros(dxp.shape[:2] + (h, dxp.shape[3]), dtype=dxp.dtype)
    np.add.at(tmp, (slice(None), slice(None), rows), dxp)
    dx = np.zeros(dxp.shape[:2] + (h, w), dtype=dxp.dtype)
    np.add.at(dx, (slice(None), slice(None), slice(None), cols), tmp)
    return dx


# im2col -------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int):
    """Patch matrix of shape (C*kh*kw, B*ho*wo) from a padded input."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, kh, kw, b, ho, wo),
        strides=(sc, sh * dilation, sw * dilation, sb, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(c * kh * kw, b * ho * wo)


def col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, dilation: int,
           ho: int, wo: int) -> np.ndarray:
    b, c, hp, wp = padded_shape
    cols = cols.reshape(c, kh, kw, b, ho, wo)
    dxp = np.zeros((c, b, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            dxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    return dxp.transpose(1, 0, 2, 3)


# convolution --------------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, pad=0, dilation=1, pad_mode="zero"):
    """Cross-correlation of ``x`` (B, Cin, H, W) with ``weight`` (Cout, Cin, kh, kw)."""
    b, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise DimensionError(f"conv2d expects {cin} input channels, got {c}")
    ho = conv_output_size(h, kh, stride, pad, dilation)
    wo = conv_output_size(w, kw, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output size {ho}x{wo} for input {h}x{w} is not positive")
    xp = pad2d(x, pad, pad_mode)
    cols = im2col(xp, kh, kw, stride, dilation, ho, wo)
    out = weight.reshape(cout, -1) @ cols
    if bias is not None:
        out += bias.reshape(-1, 1)
    out = np.ascontiguousarray(out.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))
    return out, (cols, xp.shape, weight, stride, pad, dilation, pad_mode, bias is not None)


def conv2d_backward(dout, cache):
    cols, padded_shape, weight, stride, pad, dilation, pad_mode, has_bias = cache
    cout, _, kh, kw = weight.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dmat = dout.transpose(1, 0, 2, 3).reshape(cout, -1)
    dw = (dmat @ cols.T).reshape(weight.shape)
    db = dmat.sum(axis=1) if has_bias else None
    dcols = weight.reshape(cout, -1).T @ dmat
    dxp = col2im(dcols, padded_shape, kh, kw, stride, dilation, ho, wo)
    return pad2d_backward(dxp, pad, pad_mode), dw, db


def conv_transpose2d(x, weight, bias=None, stride=2, pad=0):
    """Transposed convolution; ``weight`` is (Cin, Cout, kh, kw).

    This is the adjoint of ``conv2d`` with the same weight tensor.
    """
    b, c, h, w = x.shape
    cin, cout, kh, kw = weight.shape
    if c != cin:
        raise DimensionError(f"conv_transpose2d expects {cin} input channels, got {c}")
    hp = (h - 1) * stride + kh
    wp = (w - 1) * stride + kw
    if hp - 2 * pad < 1 or wp - 2 * pad < 1:
        raise DimensionError("conv_transpose2d output size is not positive")
    xmat = x.transpose(1, 0, 2, 3).reshape(cin, -1)
    cols = weight.reshape(cin, -1).T @ xmat
    out = col2im(cols, (b, cout, hp, wp), kh, kw, stride, 1, h, w)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out, (xmat, x.shape, weight, stride, pad, bias is not None)


def conv_transpose2d_backward(dout, cache):
    xmat, x_shape, weight, stride, pad, has_bias = cache
    cin, cout, kh, kw = weight.shape
    _, _, h, w = x_shape
    dp = pad2d(dout, pad, "zero")
    dcols = im2col(dp, kh, kw, stride, 1, h, w)
    dw = (xmat @ dcols.T).reshape(weight.shape)
    dx = (weight.reshape(cin, -1) @ dcols).reshape(cin, x_shape[0], h, w).transpose(1, 0, 2, 3)
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


# normalization ------------------------------------------------------------


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization over (B, H, W).

    In training mode the running statistics are updated in place.
    """
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise DimensionError("batchnorm2d needs at least 2 values per channel in train mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var * n / (n - 1)).astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return out, (xhat, inv_std, gamma, training)


def batchnorm2d_backward(dout, cache):
    xhat, inv_std, gamma, training = cache
    dgamma = np.sum(dout * xhat, axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(1, -1, 1, 1)
    if not training:
        return dxhat * inv_std.reshape(1, -1, 1, 1), dgamma, dbeta
    mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dxhat_xhat = np.mean(dxhat * xhat, axis=(0, 2, 3), keepdims=True)
    dx = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std.reshape(1, -1, 1, 1)
    return dx, dgamma, dbeta


# activations --------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dout, y):
    return dout * y * (1 - y)


def softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy, y, axis=-1):
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


# pooling ------------------------------------------------------------------


def maxpool2d(x, window=2, stride=2, pad=0):
    """Windowed maximum; ties go to the lowest flat index inside the window."""
    b, c, h, w = x.shape
    ho = conv_output_size(h, window, stride, pad, 1)
    wo = conv_output_size(w, window, stride, pad, 1)
    if ho < 1 or wo < 1:
        raise DimensionError(f"maxpool2d output size {ho}x{wo} is not positive")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x
    xp = np.ascontiguousarray(xp)
    sb, sc, sh, sw = xp.strides
    win = as_strided(
        xp, shape=(b, c, ho, wo, window, window),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw), writeable=False,
    ).reshape(b, c, ho, wo, window * window)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, xp.shape, window, stride, pad)


def maxpool2d_backward(dout, cache):
    arg, padded_shape, window, stride, pad = cache
    _, _, ho, wo = dout.shape
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    for i in range(window):
        for j in range(window):
            hit = arg == i * window + j
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dout * hit
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def avgpool2d(x, factor):
    """Non-overlapping ``factor``x``factor`` mean; partial edge windows average their valid cells."""
    b, c, h, w = x.shape
    ho, wo = -(-h // factor), -(-w // factor)
    ph, pw = ho * factor - h, wo * factor - w
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
    ones = np.pad(np.ones((h, w), dtype=x.dtype), ((0, ph), (0, pw)))
    counts = ones.reshape(ho, factor, wo, factor).sum(axis=(1, 3))
    sums = xp.reshape(b, c, ho, factor, wo, factor).sum(axis=(3, 5))
    return sums / counts, (counts, x.shape, factor)


def avgpool2d_backward(dout, cache):
    counts, shape, factor = cache
    g = dout / counts
    g = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
    return np.ascontiguousarray(g[:, :, :shape[2], :shape[3]])


# parameter init -----------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    pad_mode: str = "zero"
    bias: bool = True

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride, self.dilation) < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.padding < 0 or self.pad_mode not in ("zero", "replicate"):
            raise ValueError(f"invalid padding in {self}")

    def output_size(self, size: int) -> int:
        out = conv_output_size(size, self.kernel, self.stride, self.padding, self.dilation)
        if out < 1:
            raise DimensionError(f"{self} yields non-positive output for input size {size}")
        return out


def init_params(spec: ConvSpec, seed: int):
    """Kaiming-uniform weights with bound sqrt(6 / fan_in); zero bias."""
    rng = np.random.default_rng(seed)
    fan_in = spec.in_channels * spec.kernel * spec.kernel
    bound = np.sqrt(6.0 / fan_in)
    shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    weight = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    bias = np.zeros(spec.out_channels, dtype=DTYPE) if spec.bias else None
    return weight, bias


# modules ------------------------------------------------------------------


class Module:
    """Container of named parameters, gradients, buffers and child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def add_child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad.reshape(self.grads[name].shape)

    def modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children.items():
            yield from child.modules(f"{prefix}{name}.")

    def named_parameters(self):
        for prefix, mod in self.modules():
            for name, value in mod.params.items():
                yield prefix + name, value

    def named_grads(self):
        for prefix, mod in self.modules():
            for name, value in mod.grads.items():
                yield prefix + name, value

    def named_buffers(self):
        for prefix, mod in self.modules():
            for name, value in mod.buffers.items():
                yield prefix + name, value

    def state_dict(self) -> dict[str, np.ndarray]:
        state = dict(self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, mod in self.modules():
            for store in (mod.params, mod.buffers):
                for name in store:
                    value = state[prefix + name]
                    if value.shape != store[name].shape:
                        raise DimensionError(
                            f"{prefix + name}: shape {value.shape} != expected {store[name].shape}"
                        )
                    store[name] = np.array(value, dtype=store[name].dtype)
            mod.grads = {k: np.zeros_like(v) for k, v in mod.params.items()}

    def zero_grad(self) -> None:
        for _, mod in self.modules():
            for g in mod.grads.values():
                g.fill(0)

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast parameters, gradients and buffers in place (used for float64 gradchecks)."""
        for _, mod in self.modules():
            mod.params = {k: v.astype(dtype) for k, v in mod.params.items()}
            mod.grads = {k: v.astype(dtype) for k, v in mod.grads.items()}
            mod.buffers = {k: v.astype(dtype) for k, v in mod.buffers.items()}
        return self

    def num_parameters(self) -> int:
        return sum(v.size for _, v in self.named_parameters())

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        weight, bias = init_params(spec, seed)
        self.add_param("weight", weight)
        if bias is not None:
            self.add_param("bias", bias)

    def forward(self, x):
        s = self.spec
        out, self._cache = conv2d(
            x, self.params["weight"], self.params.get("bias"),
            s.stride, s.padding, s.dilation, s.pad_mode,
        )
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache)
        self.accumulate("weight", dw)
        if db is not None:
            self.accumulate("bias", db)
        return dx


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 2, stride: int = 2,
                 bias: bool = True, seed: int = 0):
        super().__init__()
        self.stride = stride
        # Each output pixel sees in_channels * (kernel / stride)**2 taps.
        fan_in = max(1.0, in_channels * (kernel / stride) ** 2)
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(in_channels, out_channels, kernel, kernel))
        self.add_param("weight", weight.astype(DTYPE))
        if bias:
            self.add_param("bias", np.zeros(out_channels, dtype=DTYPE))

    def forward(self, x):
        out, self._cache = conv_transpose2d(x, self.params["weight"], self.params.get("bias"),
                                            self.stride)
        return out

    def backward(self, dout):
        dx, dw, db = conv_transpose2d_backward(dout, self._cache)
        self.accumulate("weight", dw)
        if db is not None:
            self.accumulate("bias", db)
        return dx


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.add_param("gamma", np.ones(channels, dtype=DTYPE))
        self.add_param("beta", np.zeros(channels, dtype=DTYPE))
        self.buffers["running_mean"] = np.zeros(channels, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(channels, dtype=DTYPE)

    def forward(self, x):
        out, self._cache = batchnorm2d(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            self.training, self.momentum, self.eps,
        )
        return out

    def backward(self, dout):
        dx, dgamma, dbeta = batchnorm2d_backward(dout, self._cache)
        self.accumulate("gamma", dgamma)
        self.accumulate("beta", dbeta)
        return dx


class ReLU(Module):
    def forward(self, x):
        out, self._mask = relu(x)
        return out

    def backward(self, dout):
        return relu_backward(dout, self._mask)


class Sigmoid(Module):
    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dout):
        return sigmoid_backward(dout, self._y)


class MaxPool2d(Module):
    def __init__(self, window: int = 2, stride: int = 2, pad: int = 0):
        super().__init__()
        self.window, self.stride, self.pad = window, stride, pad

    def forward(self, x):
        out, self._cache = maxpool2d(x, self.window, self.stride, self.pad)
        return out

    def backward(self, dout):
        return maxpool2d_backward(dout, self._cache)


class Sequential(Module):
    def __init__(self, **layers: Module):
        super().__init__()
        for name, layer in layers.items():
            self.add_child(name, layer)

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(list(self.children.values())):
            dout = layer.backward(dout)
        return dout
