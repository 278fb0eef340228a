"""Geometric attention block: basis normalization, Chebyshev sampling, edge gating, attention.

Data flow for an input ``x`` with C channels::

    b_ortho = groupwise_l2(basis_proj(x))          n groups of C' channels
    y_obt   = obt_out(b_ortho)                      back to C channels
    d_max   = chebyshev(b_ortho[:, :C'], W)         weighted L-inf to dilated neighbors
    d_norm  = sigmoid(dist_norm_conv(d_max))        boundary-likeness in (0, 1)
    gate    = sigmoid(edge_gate_conv(d_norm))
    y_edge  = y_obt * (1 - gate) + edge_conv(x) * gate
    A       = softmax(Q K^T / sqrt(d_k) - lambda * d_norm[key])
    out     = y_edge + gamma * attn_out(A V)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .errors import DimensionError, NumericalError
from .tensor import (
    DTYPE,
    EPS,
    from_tokens,
    group_channels,
    l2_normalize,
    l2_normalize_backward,
    matmul_spatial,
    matmul_spatial_backward,
    reduce_max,
    reduce_max_backward,
    to_tokens,
    ungroup_channels,
)

LEVELS = ("Low", "Mid", "High", "VeryHigh")


@dataclass(frozen=True)
class GeloVecConfig:
    channels: int
    reduced: int
    bases: int
    radius: int = 1
    dilation: int = 1
    lambda_init: float = 1.0
    gamma_init: float = 0.0
    attention_grid_cap: int = 16
    attn_channels: int | None = None
    scale: int | None = None  # input-resolution divisor, informational

    def __post_init__(self):
        if self.channels < 1 or self.reduced < 1 or self.bases < 1:
            raise ValueError(f"channels, reduced and bases must be positive: {self}")
        if self.radius < 1 or self.dilation < 1:
            raise ValueError(f"radius and dilation must be >= 1: {self}")
        if self.attention_grid_cap < 4:
            raise ValueError(f"attention_grid_cap must be >= 4: {self}")

    @property
    def d_k(self) -> int:
        return self.attn_channels or max(1, self.channels // 4)

    @property
    def num_neighbors(self) -> int:
        return (2 * self.radius + 1) ** 2 - 1


_PRESETS = {
    "Low": (64, 4, 1),
    "Mid": (128, 8, 2),
    "High": (256, 16, 3),
    "VeryHigh": (512, 32, 4),
}


def make_variant(level: str, **overrides) -> GeloVecConfig:
    """Preset for one of the four encoder depths (Low, Mid, High, VeryHigh)."""
    try:
        channels, scale, dilation = _PRESETS[level]
    except KeyError:
        raise ValueError(f"unknown level {level!r}, expected one of {LEVELS}") from None
    cfg = GeloVecConfig(
        channels=channels,
        reduced=channels // 4,
        bases=4,
        radius=1,
        dilation=dilation,
        lambda_init=1.0,
        gamma_init=0.0,
        attention_grid_cap=16,
        scale=scale,
    )
    return replace(cfg, **overrides) if overrides else cfg


def neighbor_offsets(radius: int):
    return [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
            if (dy, dx) != (0, 0)]


# Chebyshev sampling -------------------------------------------------------


def gas_chebyshev(f: np.ndarray, weights: np.ndarray, radius: int = 1, dilation: int = 1):
    """Largest weighted per-channel difference between each pixel and its dilated neighbors.

    Neighbors outside the image are clamped to the nearest border pixel.
    Returns the (B, 1, H, W) distance map and the backward cache.
    """
    offsets = neighbor_offsets(radius)
    if weights.shape != (len(offsets),):
        raise DimensionError(f"expected {len(offsets)} neighbor weights, got shape {weights.shape}")
    b, c, h, w = f.shape
    pad = radius * dilation
    fp = nn.pad2d(f, pad, "replicate")
    diffs = np.empty((len(offsets), b, c, h, w), dtype=f.dtype)
    per_neighbor = np.empty((b, len(offsets), h, w), dtype=f.dtype)
    channel_args = []
    for i, (dy, dx) in enumerate(offsets):
        r0, c0 = pad + dy * dilation, pad + dx * dilation
        diffs[i] = f - fp[:, :, r0:r0 + h, c0:c0 + w]
        values, arg = reduce_max(np.abs(weights[i] * diffs[i]), axis=1)
        per_neighbor[:, i:i + 1] = values
        channel_args.append(arg)
    d_max, neighbor_arg = reduce_max(per_neighbor, axis=1)
    return d_max, (diffs, channel_args, neighbor_arg, weights, radius, dilation, fp.shape)


def gas_chebyshev_backward(dd: np.ndarray, cache):
    """Gradients with respect to the features and the neighbor weights."""
    diffs, channel_args, neighbor_arg, weights, radius, dilation, padded_shape = cache
    n, b, c, h, w = diffs.shape
    pad = radius * dilation
    dper = reduce_max_backward(dd, neighbor_arg, (b, n, h, w), axis=1)
    df = np.zeros((b, c, h, w), dtype=dd.dtype)
    dfp = np.zeros(padded_shape, dtype=dd.dtype)
    dweights = np.zeros(n, dtype=dd.dtype)
    for i, (dy, dx) in enumerate(neighbor_offsets(radius)):
        if not dper[:, i].any():
            continue
        dabs = reduce_max_backward(dper[:, i:i + 1], channel_args[i], (b, c, h, w), axis=1)
        dwd = dabs * np.sign(weights[i] * diffs[i])
        dweights[i] = np.sum(dwd * diffs[i])
        ddiff = dwd * weights[i]
        df += ddiff
        r0, c0 = pad + dy * dilation, pad + dx * dilation
        dfp[:, :, r0:r0 + h, c0:c0 + w] -= ddiff
    df += nn.pad2d_backward(dfp, pad, "replicate")
    return df, dweights


def edge_blend(y_obt: np.ndarray, f_edge: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """Convex per-pixel mix; ``gate`` has one channel and broadcasts over channels."""
    if y_obt.shape != f_edge.shape:
        raise DimensionError(f"edge blend operands differ: {y_obt.shape} vs {f_edge.shape}")
    if gate.shape[1] != 1 or gate.shape[2:] != y_obt.shape[2:] or gate.shape[0] != y_obt.shape[0]:
        raise DimensionError(f"gate shape {gate.shape} does not match features {y_obt.shape}")
    return y_obt * (1 - gate) + f_edge * gate


def _conv1x1(cin, cout, seed, name):
    return nn.Conv2d(nn.ConvSpec(cin, cout, 1), seed=nn.derive_seed(seed, name))


class GeloVecBlock(nn.Module):
    """Shape-preserving geometric attention block for one encoder stage."""

    def __init__(self, cfg: GeloVecConfig, seed: int = 0, name: str = "gelovec"):
        super().__init__()
        self.cfg = cfg
        self.name = name
        c, nc, dk = cfg.channels, cfg.bases * cfg.reduced, cfg.d_k
        self.basis_proj = self.add_child("basis_proj", _conv1x1(c, nc, seed, name + ".basis_proj"))
        self.obt_out = self.add_child("obt_out", _conv1x1(nc, c, seed, name + ".obt_out"))
        self.dist_norm_conv = self.add_child("dist_norm_conv",
                                             _conv1x1(1, 1, seed, name + ".dist_norm_conv"))
        self.edge_conv = self.add_child("edge_conv", nn.Conv2d(
            nn.ConvSpec(c, c, 3, padding=1), seed=nn.derive_seed(seed, name + ".edge_conv")))
        self.edge_gate_conv = self.add_child("edge_gate_conv",
                                             _conv1x1(1, 1, seed, name + ".edge_gate_conv"))
        self.q_conv = self.add_child("q_conv", _conv1x1(c, dk, seed, name + ".q_conv"))
        self.k_conv = self.add_child("k_conv", _conv1x1(c, dk, seed, name + ".k_conv"))
        self.v_conv = self.add_child("v_conv", _conv1x1(c, dk, seed, name + ".v_conv"))
        self.attn_out = self.add_child("attn_out", _conv1x1(dk, c, seed, name + ".attn_out"))
        # Jittered around 1 so border pixels, whose clamped neighbors repeat, never tie.
        rng = np.random.default_rng(nn.derive_seed(seed, name + ".neighbor_weights"))
        self.add_param("neighbor_weights",
                       rng.uniform(0.5, 1.5, size=cfg.num_neighbors).astype(DTYPE))
        self.add_param("lambda", np.array([cfg.lambda_init], dtype=DTYPE))
        self.add_param("gamma", np.array([cfg.gamma_init], dtype=DTYPE))
        self.record = False
        self.last_attention = None
        self.last_d_norm = None

    # basis transform -----------------------------------------------------

    def obt_forward(self, x):
        b_proj = self.basis_proj.forward(x)
        b_ortho, self._norm_cache = l2_normalize(group_channels(b_proj, self.cfg.bases), axis=2,
                                                 eps=EPS)
        self.b_ortho = ungroup_channels(b_ortho)
        return self.obt_out.forward(self.b_ortho)

    def obt_backward(self, dy_obt, db_ortho_extra=None):
        db_ortho = self.obt_out.backward(dy_obt)
        if db_ortho_extra is not None:
            db_ortho = db_ortho + db_ortho_extra
        db_proj = l2_normalize_backward(group_channels(db_ortho, self.cfg.bases), self._norm_cache)
        return self.basis_proj.backward(ungroup_channels(db_proj))

    # distance map --------------------------------------------------------

    def gas_normalize(self, d_max):
        self._d_norm = nn.sigmoid(self.dist_norm_conv.forward(d_max))
        return self._d_norm

    def gas_normalize_backward(self, dd_norm):
        return self.dist_norm_conv.backward(nn.sigmoid_backward(dd_norm, self._d_norm))

    # edge preservation ---------------------------------------------------

    def edge_gate(self, d_norm):
        return nn.sigmoid(self.edge_gate_conv.forward(d_norm))

    def edge_preserve(self, y_obt, x, d_norm):
        if y_obt.shape != x.shape:
            raise DimensionError(f"y_obt {y_obt.shape} and x {x.shape} differ")
        f_edge = self.edge_conv.forward(x)
        gate = self.edge_gate(d_norm)
        self._edge_cache = (y_obt, f_edge, gate)
        return edge_blend(y_obt, f_edge, gate)

    def edge_preserve_backward(self, dy):
        y_obt, f_edge, gate = self._edge_cache
        dy_obt = dy * (1 - gate)
        dx = self.edge_conv.backward(dy * gate)
        dgate = np.sum(dy * (f_edge - y_obt), axis=1, keepdims=True)
        dd_norm = self.edge_gate_conv.backward(nn.sigmoid_backward(dgate, gate))
        return dy_obt, dx, dd_norm

    # attention -----------------------------------------------------------

    def pool_factor(self, h, w):
        side = max(h, w)
        cap = self.cfg.attention_grid_cap
        return 1 if side <= cap else math.ceil(side / cap)

    def geo_attention(self, y_edge, d_norm):
        b, _, h, w = y_edge.shape
        q = self.q_conv.forward(y_edge)
        k = self.k_conv.forward(y_edge)
        v = self.v_conv.forward(y_edge)
        factor = self.pool_factor(h, w)
        pool_caches = None
        d_keys = d_norm
        if factor > 1:
            k, ck = nn.avgpool2d(k, factor)
            v, cv = nn.avgpool2d(v, factor)
            d_keys, cd = nn.avgpool2d(d_norm, factor)
            pool_caches = (ck, cv, cd)
        lam = self.params["lambda"][0]
        scale = 1.0 / math.sqrt(self.cfg.d_k)
        d_flat = d_keys.reshape(b, 1, -1)
        scores = matmul_spatial(q, k) * scale - lam * d_flat
        if not np.all(np.isfinite(scores)):
            raise NumericalError(f"{self.name}: non-finite attention scores")
        attn = nn.softmax(scores, axis=-1)
        o_tokens = np.matmul(attn, to_tokens(v))
        o = from_tokens(o_tokens, h, w)
        proj = self.attn_out.forward(o)
        self._attn_cache = (q, k, v, attn, d_flat, proj, scale, pool_caches, d_keys.shape)
        if self.record:
            self.last_attention = attn.copy()
            self.last_d_norm = d_norm.copy()
        return y_edge + self.params["gamma"][0] * proj

    def geo_attention_backward(self, dy):
        q, k, v, attn, d_flat, proj, scale, pool_caches, d_keys_shape = self._attn_cache
        gamma = self.params["gamma"][0]
        lam = self.params["lambda"][0]
        self.accumulate("gamma", np.sum(dy * proj))
        do = to_tokens(self.attn_out.backward(dy * gamma))
        dattn = np.matmul(do, to_tokens(v).transpose(0, 2, 1))
        dv = from_tokens(np.matmul(attn.transpose(0, 2, 1), do), v.shape[2], v.shape[3])
        dscores = nn.softmax_backward(dattn, attn, axis=-1)
        self.accumulate("lambda", -np.sum(dscores * d_flat))
        dd_keys = (-lam * dscores.sum(axis=1)).reshape(d_keys_shape)
        dq, dk = matmul_spatial_backward(dscores * scale, q, k)
        if pool_caches is not None:
            ck, cv, cd = pool_caches
            dk = nn.avgpool2d_backward(dk, ck)
            dv = nn.avgpool2d_backward(dv, cv)
            dd_keys = nn.avgpool2d_backward(dd_keys, cd)
        dy_edge = (dy + self.q_conv.backward(dq) + self.k_conv.backward(dk)
                   + self.v_conv.backward(dv))
        return dy_edge, dd_keys

    # composition ---------------------------------------------------------

    def forward(self, x):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.channels:
            raise DimensionError(f"{self.name} expects {cfg.channels} channels, got shape {x.shape}")
        y_obt = self.obt_forward(x)
        d_max, self._gas_cache = gas_chebyshev(self.b_ortho[:, :cfg.reduced],
                                               self.params["neighbor_weights"],
                                               cfg.radius, cfg.dilation)
        d_norm = self.gas_normalize(d_max)
        y_edge = self.edge_preserve(y_obt, x, d_norm)
        return self.geo_attention(y_edge, d_norm)

    def backward(self, dy):
        cfg = self.cfg
        dy_edge, dd_norm_attn = self.geo_attention_backward(dy)
        dy_obt, dx_edge, dd_norm_gate = self.edge_preserve_backward(dy_edge)
        dd_max = self.gas_normalize_backward(dd_norm_attn + dd_norm_gate)
        df, dweights = gas_chebyshev_backward(dd_max, self._gas_cache)
        self.accumulate("neighbor_weights", dweights)
        db_ortho = np.zeros_like(self.b_ortho)
        db_ortho[:, :cfg.reduced] = df
        return dx_edge + self.obt_backward(dy_obt, db_ortho)
