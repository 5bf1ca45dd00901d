"""Attention over latent tokens with optional positional information.

Tokens are the ``n = n_x * n_y`` cells of the latent grid (row-major), each
with a feature vector ``f_i`` and a positional vector ``p_i``. A head
computes ``df_i = sum_j kappa_ij V(f_j)`` where the weight ``kappa``
depends on the variant:

====  ======================  =====================================================
M0    no positions            softmax_j(Q f_i . K f_j / sqrt(d_h))
M1    cartesian, additive     softmax_j(Q(f_i+p_i) . K(f_j+p_j) / sqrt(d_h)); V(f+p)
M2    periodic, additive      as M1 with periodic features
M3    periodic, logit bias    softmax_j(Q f_i . K f_j / sqrt(d_h) + G_ij)
M4    periodic, product       G_ij * softmax_j(Q f_i . K f_j / sqrt(d_h))
====  ======================  =====================================================

``G_ij`` is a small per-head MLP evaluated on the relative arguments of the
pair (i, j). For M1/M2 the raw positional features are lifted to width
``d_f`` by a learned linear map before being added.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from .tensor import Module, Tensor, as_tensor, ops, uniform_fan_in


class AttnVariant(str, Enum):
    M0 = "M0"
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"
    M4 = "M4"

    @property
    def construction(self) -> Optional[str]:
        return {"M0": None, "M1": "cartesian"}.get(self.value, "periodic")

    @property
    def additive(self) -> bool:
        return self in (AttnVariant.M1, AttnVariant.M2)

    @property
    def uses_g(self) -> bool:
        return self in (AttnVariant.M3, AttnVariant.M4)


# positions ----------------------------------------------------------------

def periodic_features(x, y, n_x: int, n_y: int) -> np.ndarray:
    """(sin, cos) of the x angle then of the y angle; integer coords wrap exactly."""
    ax = 2 * np.pi * (np.asarray(x) % n_x) / n_x
    ay = 2 * np.pi * (np.asarray(y) % n_y) / n_y
    out = np.stack([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=-1)
    out[np.abs(out) < 1e-14] = 0.0  # sin(pi) and friends are exactly zero on the grid
    return out


def positional_features(n_x: int, n_y: int, construction: str) -> np.ndarray:
    """(n, d_p) positional vectors of the latent cells in row-major order."""
    if n_x < 1 or n_y < 1:
        raise ValueError(f"latent grid must be at least 1x1, got {n_x}x{n_y}")
    x, y = np.meshgrid(np.arange(n_x), np.arange(n_y), indexing="ij")
    x, y = x.reshape(-1), y.reshape(-1)
    if construction == "cartesian":
        return np.stack([x, y], axis=-1).astype(np.float64)
    if construction == "periodic":
        return periodic_features(x, y, n_x, n_y)
    raise ValueError(f"unknown positional construction {construction!r}")


REL_FORMS = ("literal", "angle")


def _angle_difference(p_i: np.ndarray, p_j: np.ndarray) -> np.ndarray:
    # per (sin, cos) pair: (sin(a_j - a_i), cos(a_j - a_i) - 1), zero when a_i == a_j
    si, ci = p_i[..., 0::2], p_i[..., 1::2]
    sj, cj = p_j[..., 0::2], p_j[..., 1::2]
    d_sin = sj * ci - cj * si
    d_cos = cj * ci + sj * si - 1.0
    out = np.empty(np.broadcast_shapes(p_i.shape, p_j.shape))
    out[..., 0::2] = d_sin
    out[..., 1::2] = d_cos
    return out


def relative_pos_args(p_i, p_j, form: str = "literal") -> np.ndarray:
    """Arguments ``(d, |d|)`` of the positional encoder for the pair (i, j).

    ``form="literal"``: ``d = p_j - p_i``, so ``|d| = |p_i - p_j|``.
    ``form="angle"``: for periodic (sin, cos) features, ``d`` is the angle
    difference written in p_i's frame, which depends only on the grid
    displacement and is therefore unchanged by circular shifts.
    """
    p_i, p_j = np.asarray(p_i, dtype=np.float64), np.asarray(p_j, dtype=np.float64)
    if p_i.shape[-1] != p_j.shape[-1]:
        raise ValueError(f"positions differ in dimension: {p_i.shape} vs {p_j.shape}")
    if form == "literal":
        d = p_j - p_i
    elif form == "angle":
        if p_i.shape[-1] % 2:
            raise ValueError("angle form needs (sin, cos) pairs")
        d = _angle_difference(p_i, p_j)
    else:
        raise ValueError(f"unknown relative form {form!r}; choose from {REL_FORMS}")
    return np.concatenate([d, np.abs(d)], axis=-1)


def relative_pos_table(p: np.ndarray, form: str = "literal") -> np.ndarray:
    """(n, n, 2 d_p) table whose [i, j] entry is ``relative_pos_args(p[i], p[j])``."""
    return relative_pos_args(p[:, None, :], p[None, :, :], form)


def default_rel_form(construction: Optional[str]) -> str:
    return "angle" if construction == "periodic" else "literal"


# weights -------------------------------------------------------------------

class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.weight = uniform_fan_in(rng, (d_in, d_out), d_in)
        self.bias = uniform_fan_in(rng, (d_out,), d_in)

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class PositionalEncoder(Module):
    """Scalar MLP ``G`` over relative-position arguments (Leaky ReLU hidden layers)."""

    def __init__(self, rng: np.random.Generator, d_in: int, hidden: int = 32, depth: int = 2,
                 slope: float = 0.01):
        dims = [d_in] + [hidden] * depth + [1]
        self.fc = [Linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.slope = slope

    def __call__(self, args) -> Tensor:
        h = as_tensor(args)
        for i, layer in enumerate(self.fc):
            h = layer(h)
            if i < len(self.fc) - 1:
                h = ops.leaky_relu(h, self.slope)
        return ops.reshape(h, h.shape[:-1])

    def numpy_eval(self, arg: np.ndarray) -> float:
        h = np.asarray(arg, dtype=np.float64)
        for i, layer in enumerate(self.fc):
            h = h @ layer.weight.data + layer.bias.data
            if i < len(self.fc) - 1:
                h = np.where(h > 0, h, self.slope * h)
        return float(h[0])


class Head(Module):
    """Q, K, V maps of one head plus its positional machinery.

    M1/M2 heads own ``lift`` (raw positions -> width d_f); M3/M4 heads own
    ``G``. M0 heads own neither.
    """

    def __init__(self, rng: np.random.Generator, d_f: int, d_h: int, variant: AttnVariant,
                 d_p: int = 4, g_hidden: int = 32, g_depth: int = 2):
        variant = AttnVariant(variant)
        self.Q = Linear(rng, d_f, d_h)
        self.K = Linear(rng, d_f, d_h)
        self.V = Linear(rng, d_f, d_h)
        if variant.additive:
            self.lift = Linear(rng, d_p, d_f)
        if variant.uses_g:
            self.G = PositionalEncoder(rng, 2 * d_p, g_hidden, g_depth)
        self.variant = variant
        self.d_h = d_h


# forward paths -------------------------------------------------------------------

def attention_head(f, p: Optional[np.ndarray], head: Head, variant=None,
                   rel: Optional[np.ndarray] = None, rel_form: Optional[str] = None,
                   trace: Optional[dict] = None) -> Tensor:
    """Vectorised single head: features (B, n, d_f) -> increments (B, n, d_h).

    ``rel`` may pass a precomputed :func:`relative_pos_table`; otherwise it
    is built from ``p`` with ``rel_form`` (default per construction).
    ``trace`` (a dict) receives the tensor fed to Q/K/V and the weights.
    """
    variant = AttnVariant(variant or head.variant)
    f = as_tensor(f)
    squeeze = f.ndim == 2
    if squeeze:
        f = ops.reshape(f, (1,) + f.shape)
    if variant.construction is not None and p is None and not (variant.uses_g and rel is not None):
        raise ValueError(f"variant {variant.value} needs positional features")
    x = f
    if variant.additive:
        x = ops.add(f, head.lift(p))
    q, k, v = head.Q(x), head.K(x), head.V(x)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(head.d_h))
    if variant.uses_g:
        if rel is None:
            rel = relative_pos_table(p, rel_form or default_rel_form(variant.construction))
        g = head.G(rel)
    if variant == AttnVariant.M3:
        weights = ops.softmax(ops.add(scores, g), axis=-1)
        soft = weights
    elif variant == AttnVariant.M4:
        soft = ops.softmax(scores, axis=-1)
        weights = ops.mul(g, soft)
    else:
        weights = soft = ops.softmax(scores, axis=-1)
    out = ops.matmul(weights, v)
    if trace is not None:
        trace.update(qkv_input=x, weights=weights, softmax=soft)
    return ops.reshape(out, out.shape[1:]) if squeeze else out


def multi_head_attention(f, p: Optional[np.ndarray], heads: Sequence[Head], out: Linear,
                         variant=None, rel: Optional[np.ndarray] = None,
                         rel_form: Optional[str] = None) -> Tensor:
    """Concatenate every head's increment along features, then apply ``out``."""
    total = sum(h.d_h for h in heads)
    if total != out.weight.shape[0]:
        raise ValueError(f"head widths sum to {total}, output map expects {out.weight.shape[0]}")
    parts = [attention_head(f, p, h, variant, rel=rel, rel_form=rel_form) for h in heads]
    return out(ops.concat(parts, axis=-1) if len(parts) > 1 else parts[0])


def oracle_attention(f, p: Optional[np.ndarray], head: Head, variant=None,
                     rel_form: Optional[str] = None) -> np.ndarray:
    """Double-loop transcription of ``df_i = sum_j kappa_ij V(f_j)`` in NumPy."""
    variant = AttnVariant(variant or head.variant)
    f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    squeeze = f.ndim == 2
    if squeeze:
        f = f[None]
    form = rel_form or default_rel_form(variant.construction)
    Wq, bq = head.Q.weight.data, head.Q.bias.data
    Wk, bk = head.K.weight.data, head.K.bias.data
    Wv, bv = head.V.weight.data, head.V.bias.data
    B, n, _ = f.shape
    out = np.zeros((B, n, head.d_h))
    for b in range(B):
        x = [f[b, i] for i in range(n)]
        if variant.additive:
            x = [x[i] + p[i] @ head.lift.weight.data + head.lift.bias.data for i in range(n)]
        for i in range(n):
            qi = x[i] @ Wq + bq
            logits = []
            for j in range(n):
                kj = x[j] @ Wk + bk
                s = float(np.dot(qi, kj)) / np.sqrt(head.d_h)
                if variant == AttnVariant.M3:
                    s += head.G.numpy_eval(relative_pos_args(p[i], p[j], form))
                logits.append(s)
            top = max(logits)
            expo = [np.exp(s - top) for s in logits]
            total = sum(expo)
            for j in range(n):
                kappa = expo[j] / total
                if variant == AttnVariant.M4:
                    kappa *= head.G.numpy_eval(relative_pos_args(p[i], p[j], form))
                out[b, i] += kappa * (x[j] @ Wv + bv)
    return out[0] if squeeze else out


@dataclass
class AttentionConfig:
    variant: AttnVariant = AttnVariant.M4
    d_f: int = 32
    n_heads: int = 8
    g_hidden: int = 32
    g_depth: int = 2
    construction: Optional[str] = None
    rel_form: Optional[str] = None

    def __post_init__(self):
        self.variant = AttnVariant(self.variant)
        if self.d_f % self.n_heads:
            raise ValueError(f"d_f={self.d_f} is not divisible by n_heads={self.n_heads}")
        if self.construction is None:
            self.construction = self.variant.construction
        if self.rel_form is None:
            self.rel_form = default_rel_form(self.construction)

    @property
    def d_h(self) -> int:
        return self.d_f // self.n_heads

    @property
    def d_p(self) -> int:
        return 2 if self.construction == "cartesian" else 4


def make_heads(rng: np.random.Generator, cfg: AttentionConfig) -> List[Head]:
    return [Head(rng, cfg.d_f, cfg.d_h, cfg.variant, cfg.d_p, cfg.g_hidden, cfg.g_depth)
            for _ in range(cfg.n_heads)]
