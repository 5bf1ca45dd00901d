"""Dynamical model ``D^dt``: a stack of residual attention + pointwise FFN layers.

Each layer computes ``z' = z + MHA(z)`` then ``z' + FFN(z')``. The FFN is the
same two-layer network applied to every token (a 1x1 convolution over the
latent grid). There is no normalization and no dropout.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from .attention import (AttentionConfig, AttnVariant, Linear, make_heads, multi_head_attention,
                        positional_features, relative_pos_table)
from .tensor import Module, ShapeError, Tensor, as_tensor, no_grad, ops


@dataclass
class DynConfig:
    d_f: int = 32
    n_layers: int = 4
    n_heads: int = 8
    variant: str = "M4"
    g_hidden: int = 32
    g_depth: int = 2
    ffn_mult: int = 2
    slope: float = 0.01
    rel_form: Optional[str] = None
    branch_init: float = 0.1

    def __post_init__(self):
        self.variant = AttnVariant(self.variant).value
        if self.n_layers < 1:
            raise ValueError("need at least one layer")
        self.attention()  # validates d_f / n_heads

    def attention(self) -> AttentionConfig:
        return AttentionConfig(AttnVariant(self.variant), self.d_f, self.n_heads,
                               self.g_hidden, self.g_depth, rel_form=self.rel_form)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rel_form"] = self.attention().rel_form
        return d


class TransformerLayer(Module):
    def __init__(self, rng: np.random.Generator, cfg: DynConfig):
        att = cfg.attention()
        self.head = make_heads(rng, att)
        self.out = Linear(rng, cfg.d_f, cfg.d_f)
        self.ffn1 = Linear(rng, cfg.d_f, cfg.ffn_mult * cfg.d_f)
        self.ffn2 = Linear(rng, cfg.ffn_mult * cfg.d_f, cfg.d_f)
        for last in (self.out, self.ffn2):
            last.weight.data *= cfg.branch_init
            last.bias.data *= cfg.branch_init
        self.slope = cfg.slope
        self.variant = att.variant
        self.d_f = cfg.d_f

    def ffn(self, z) -> Tensor:
        return self.ffn2(ops.leaky_relu(self.ffn1(z), self.slope))

    def __call__(self, z, p=None, rel=None) -> Tensor:
        z = as_tensor(z)
        if z.shape[-1] != self.d_f:
            raise ShapeError(f"token width {z.shape[-1]} does not match layer width {self.d_f}")
        z = ops.add(z, multi_head_attention(z, p, self.head, self.out, self.variant, rel=rel))
        return ops.add(z, self.ffn(z))


def transformer_layer(z, layer: TransformerLayer, p=None, rel=None) -> Tensor:
    return layer(z, p, rel)


class DynModel(Module):
    """Advances a latent grid (B, n_x, n_y, d_f) by ``delta_t`` recorded steps."""

    def __init__(self, delta_t: int, cfg: DynConfig = None, seed: int = 0):
        if int(delta_t) != delta_t or delta_t < 1:
            raise ValueError(f"delta_t must be a positive integer, got {delta_t}")
        self.delta_t = int(delta_t)
        self.cfg = cfg or DynConfig()
        rng = np.random.default_rng(seed)
        self.layer = [TransformerLayer(rng, self.cfg) for _ in range(self.cfg.n_layers)]
        self._pos_cache: Dict[tuple, tuple] = {}

    @property
    def variant(self) -> AttnVariant:
        return AttnVariant(self.cfg.variant)

    def positions(self, n_x: int, n_y: int):
        """(p, rel) for a latent grid; cached because they depend only on the grid."""
        key = (n_x, n_y)
        if key not in self._pos_cache:
            att = self.cfg.attention()
            p = rel = None
            if att.construction is not None:
                p = positional_features(n_x, n_y, att.construction)
                if att.variant.uses_g:
                    rel = relative_pos_table(p, att.rel_form)
            self._pos_cache[key] = (p, rel)
        return self._pos_cache[key]

    def __call__(self, z) -> Tensor:
        z = as_tensor(z)
        if z.ndim != 4 or z.shape[-1] != self.cfg.d_f:
            raise ShapeError(f"dyn model expects (B, n_x, n_y, {self.cfg.d_f}), got {z.shape}")
        B, n_x, n_y, d_f = z.shape
        p, rel = self.positions(n_x, n_y)
        h = ops.reshape(z, (B, n_x * n_y, d_f))
        for layer in self.layer:
            h = layer(h, p, rel)
        return ops.reshape(h, z.shape)


def dyn_step(z, model: DynModel) -> np.ndarray:
    """One application of ``model`` to a latent (n_x, n_y, d_f) or a batch, no graph."""
    arr = np.asarray(z, dtype=np.float64)
    single = arr.ndim == 3
    with no_grad():
        out = model(arr[None] if single else arr).data
    return out[0] if single else out


def parameter_counts(d_f: int = 32, widths=(16, 32, 64), n_scales: int = 4,
                     dyn: Optional[DynConfig] = None) -> dict:
    """Parameters of the autoencoder, one dynamical model and the full bundle."""
    from .autoencoder import ConvAutoencoder

    dyn = dyn or DynConfig(d_f=d_f)
    cae = ConvAutoencoder(d_f=d_f, widths=widths).num_parameters()
    one = DynModel(1, dyn).num_parameters()
    return {"autoencoder": cae, "dyn_model": one, "n_scales": n_scales,
            "total": cae + n_scales * one}


# d_f that brings the autoencoder plus four 4-layer, 8-head models closest to the
# reference budget of about 1.02M parameters (0.977M)
PAPER_SCALE_D_F = 72
REFERENCE_PARAMS = 1.02e6
