"""Gradient-check suites for individual ops, the geometric block, and the full model."""

from __future__ import annotations

import numpy as np

from . import nn, tensor
from .block import GeloVecBlock, GeloVecConfig, gas_chebyshev, gas_chebyshev_backward, make_variant
from .network import ModelConfig, build_model
from .train import grad_check

SCOPES = ("ops", "gelovec", "model")


class Lambda(nn.Module):
    """Wrap a parameter-free ``(forward -> (out, cache), backward)`` pair as a module."""

    def __init__(self, fwd, bwd):
        super().__init__()
        self._fwd, self._bwd = fwd, bwd

    def forward(self, x):
        out, self._cache = self._fwd(x)
        return out

    def backward(self, dout):
        return self._bwd(dout, self._cache)


class ChebyshevProbe(nn.Module):
    """Chebyshev distance map with trainable neighbor weights, for gradient checks."""

    def __init__(self, radius, dilation, seed=0):
        super().__init__()
        self.radius, self.dilation = radius, dilation
        n = (2 * radius + 1) ** 2 - 1
        self.add_param("weights", np.random.default_rng(seed).uniform(0.5, 1.5, n))

    def forward(self, x):
        out, self._cache = gas_chebyshev(x, self.params["weights"], self.radius, self.dilation)
        return out

    def backward(self, dout):
        dx, dw = gas_chebyshev_backward(dout, self._cache)
        self.accumulate("weights", dw)
        return dx


class SpatialScores(nn.Module):
    """Scores of ``x`` against a fixed key tensor."""

    def __init__(self, keys):
        super().__init__()
        self.add_param("keys", keys)

    def forward(self, x):
        self._x = x
        return tensor.matmul_spatial(x, self.params["keys"])[:, None]

    def backward(self, dout):
        dq, dk = tensor.matmul_spatial_backward(dout[:, 0], self._x, self.params["keys"])
        self.accumulate("keys", dk)
        return dq


def _with_active_attention(module, gamma=0.5):
    # gamma starts at 0, which would leave the attention path without gradient.
    for _, mod in module.modules():
        if isinstance(mod, GeloVecBlock):
            mod.params["gamma"][...] = gamma
    return module


def op_cases(seed=0):
    rng = np.random.default_rng(seed)

    def rand(*shape):
        return rng.standard_normal(shape)

    gate = rand(2, 1, 4, 4)

    return [
        ("ew_mul", Lambda(lambda x: tensor.ew_binary(x, gate, "mul"),
                          lambda d, c: tensor.ew_binary_backward(d, c)[0]), rand(2, 3, 4, 4)),
        ("reduce_max", Lambda(lambda x: (tensor.reduce_max(x, 1)[0], (tensor.reduce_max(x, 1)[1], x.shape)),
                              lambda d, c: tensor.reduce_max_backward(d, c[0], c[1], 1)), rand(2, 5, 3, 3)),
        ("l2_normalize", Lambda(lambda x: tensor.l2_normalize(x, 1),
                                tensor.l2_normalize_backward), rand(1, 6, 2, 2)),
        ("matmul_spatial", SpatialScores(rand(1, 3, 2, 2)), rand(1, 3, 2, 2)),
        ("conv2d_3x3", nn.Conv2d(nn.ConvSpec(2, 3, 3, padding=1), seed=seed), rand(2, 2, 5, 5)),
        ("conv2d_7x7_s2", nn.Conv2d(nn.ConvSpec(2, 2, 7, stride=2, padding=3), seed=seed), rand(1, 2, 8, 8)),
        ("conv2d_dilated_replicate", nn.Conv2d(
            nn.ConvSpec(2, 2, 3, dilation=2, padding=2, pad_mode="replicate"), seed=seed), rand(1, 2, 5, 5)),
        ("conv_transpose2d", nn.ConvTranspose2d(3, 2, 2, 2, seed=seed), rand(2, 3, 3, 3)),
        ("batchnorm2d", nn.BatchNorm2d(3), rand(2, 3, 4, 4)),
        ("relu", nn.ReLU(), rand(2, 3, 4, 4)),
        ("sigmoid", nn.Sigmoid(), rand(2, 3, 4, 4)),
        ("softmax", Lambda(lambda x: (lambda y: (y, y))(nn.softmax(x, axis=1)),
                           lambda d, y: nn.softmax_backward(d, y, axis=1)), rand(2, 4, 3, 3)),
        ("maxpool2d", nn.MaxPool2d(2, 2), rand(2, 2, 6, 6)),
        ("maxpool2d_3x3", nn.MaxPool2d(3, 2, 1), rand(1, 2, 7, 7)),
        ("avgpool2d", Lambda(lambda x: nn.avgpool2d(x, 2), nn.avgpool2d_backward), rand(1, 2, 5, 5)),
        ("gas_chebyshev", ChebyshevProbe(1, 2, seed), rand(1, 3, 5, 5)),
    ]


def gelovec_cases(seed=0):
    rng = np.random.default_rng(seed)
    toy = GeloVecConfig(channels=8, reduced=3, bases=2, dilation=2, attention_grid_cap=4)
    low = make_variant("Low")
    return [
        ("gelovec_toy", _with_active_attention(GeloVecBlock(toy, seed=seed)),
         rng.standard_normal((1, 8, 6, 6))),
        ("gelovec_low_desk", _with_active_attention(GeloVecBlock(low, seed=seed, name="low")),
         rng.standard_normal((1, 64, 16, 16))),
    ]


def model_cases(seed=0, input_size=64, batch=2):
    cfg = ModelConfig(input_size=(input_size, input_size), blocks=(1, 1, 1, 1))
    model = _with_active_attention(build_model(cfg, seed=seed))
    x = np.random.default_rng(seed).random((batch, 3, input_size, input_size))
    return [("model_desk", model, x)]


def run_scope(scope: str, seed: int = 0, tolerance: float = 1e-4):
    """Run one gradient-check suite; returns ``[(case_name, report), ...]``."""
    if scope == "ops":
        cases, kw = op_cases(seed), {"max_exhaustive": 10_000}
    elif scope == "gelovec":
        cases, kw = gelovec_cases(seed), {"max_exhaustive": 64, "probes": 3}
    elif scope == "model":
        cases, kw = model_cases(seed), {"max_exhaustive": 16, "probes": 2}
    else:
        raise ValueError(f"unknown scope {scope!r}, expected one of {SCOPES}")
    return [(name, grad_check(mod, x, tolerance=tolerance, seed=seed, **kw)) for name, mod, x in cases]
