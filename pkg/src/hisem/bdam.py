"""Bidirectional differential attention modulation.

Each layer runs two sublayers on a pair of token grids:

* discrepancy-aware feature conditioning (DFC): an MLP over the concatenated
  streams yields a channel gate that reweights ``|F_T1 - F_T2|``; each stream
  goes through its own 3x3 convolution and the reweighted difference is added
  back on top of a residual connection;
* bidirectional discrepancy-guided cross-temporal interaction (BDCI): the
  reweighted difference becomes a diagonal attention bias, attention is run
  in both temporal directions, the two attention maps are subtracted with a
  learnable balance ``lam`` and the result is blended into each stream with a
  sigmoid gate.

All functions accept an optional leading batch axis: features are
``[L, D]`` or ``[B, L, D]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv3x3, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class BiTemporalFeatures:
    f_t1: Tensor
    f_t2: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        if self.f_t1.shape != self.f_t2.shape:
            raise T.ShapeError(f"temporal streams differ in shape: {self.f_t1.shape} vs {self.f_t2.shape}")
        h, w = self.grid
        if h * w != self.f_t1.shape[-2]:
            raise T.ShapeError(f"grid {h}x{w} does not cover {self.f_t1.shape[-2]} tokens")

    def swap(self) -> "BiTemporalFeatures":
        return BiTemporalFeatures(self.f_t2, self.f_t1, self.grid)


class GatedFusion(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.proj = Linear(2 * d, d, rng)

    def forward(self, original: Tensor, attended: Tensor) -> Tensor:
        return gated_fusion(original, attended, self)


class BdamLayerParams(Module):
    """Weights of one BDAM layer.

    With ``tied=True`` the T2 stream reuses every T1 module and the
    T2->T1 direction reuses the T1->T2 projections. That configuration only
    exists for symmetry tests.
    """

    def __init__(self, d: int, rng: np.random.Generator, d_hidden: int | None = None, tied: bool = False):
        d_hidden = d_hidden or d
        self.d = d
        self.tied = tied
        self.w1 = Linear(2 * d, d_hidden, rng)
        self.w2 = Linear(d_hidden, d, rng)
        self.conv_t1 = Conv3x3(d, d, rng)
        self.conv_t2 = self.conv_t1 if tied else Conv3x3(d, d, rng)
        self.w_bias_12 = Linear(d, 1, rng, bias=False)
        self.w_bias_21 = self.w_bias_12 if tied else Linear(d, 1, rng, bias=False)
        self.alpha_12 = T.param(np.ones(1))
        self.alpha_21 = self.alpha_12 if tied else T.param(np.ones(1))
        self.q_12, self.k_12, self.v_12 = (Linear(d, d, rng, bias=False) for _ in range(3))
        if tied:
            self.q_21, self.k_21, self.v_21 = self.q_12, self.k_12, self.v_12
        else:
            self.q_21, self.k_21, self.v_21 = (Linear(d, d, rng, bias=False) for _ in range(3))
        # lambda = sigmoid(lambda_logit); starts at 0.5
        self.lambda_logit = T.param(np.zeros(1))
        self.gate_t1 = GatedFusion(d, rng)
        self.gate_t2 = self.gate_t1 if tied else GatedFusion(d, rng)
        self.norm_dfc_t1 = LayerNorm(d)
        self.norm_dfc_t2 = self.norm_dfc_t1 if tied else LayerNorm(d)
        self.norm_out_t1 = LayerNorm(d)
        self.norm_out_t2 = self.norm_out_t1 if tied else LayerNorm(d)

    @property
    def lam(self) -> Tensor:
        return T.sigmoid(self.lambda_logit)

    def forward(self, x: BiTemporalFeatures) -> BiTemporalFeatures:
        return bdam_layer(x, self)


def diff_features(x: BiTemporalFeatures) -> Tensor:
    return T.tabs(x.f_t1 - x.f_t2)


def condition_gate(x: BiTemporalFeatures, p: BdamLayerParams) -> Tensor:
    """Channel-wise modulation weights in (0, 1), one row per token."""
    joint = T.concat([x.f_t1, x.f_t2], axis=-1)
    return T.sigmoid(p.w2(T.relu(p.w1(joint))))


def feature_conditioning(x: BiTemporalFeatures, p: BdamLayerParams) -> tuple[BiTemporalFeatures, Tensor]:
    """Return the conditioned streams (before normalisation) and the reweighted difference."""
    f_diff = diff_features(x) * condition_gate(x, p)
    hat_t1 = x.f_t1 + p.conv_t1(x.f_t1, x.grid) + f_diff
    hat_t2 = x.f_t2 + p.conv_t2(x.f_t2, x.grid) + f_diff
    return BiTemporalFeatures(hat_t1, hat_t2, x.grid), f_diff


def attention_bias(f_diff: Tensor, w: Linear, alpha: Tensor) -> Tensor:
    """``alpha * Diag(w(f_diff))``: ``[..., L, D] -> [..., L, L]``, zero off the diagonal."""
    scores = w(f_diff)
    scores = scores.reshape(scores.shape[:-1])
    return T.diag_embed(scores) * alpha


def _attention_map(q: Tensor, k: Tensor, bias: Tensor) -> Tensor:
    logits = T.scale(T.matmul(q, k.swapaxes(-1, -2)), 1.0 / np.sqrt(q.shape[-1]))
    return T.softmax_lastdim(logits + bias)


def bidirectional_attention_maps(x_hat: BiTemporalFeatures, f_diff: Tensor, p: BdamLayerParams):
    """Both directional attention maps ``(A_12, A_21)``, rows summing to one."""
    b12 = attention_bias(f_diff, p.w_bias_12, p.alpha_12)
    b21 = attention_bias(f_diff, p.w_bias_21, p.alpha_21)
    a12 = _attention_map(p.q_12(x_hat.f_t1), p.k_12(x_hat.f_t2), b12)
    a21 = _attention_map(p.q_21(x_hat.f_t2), p.k_21(x_hat.f_t1), b21)
    return a12, a21


def bidirectional_diff_attention(
    x_hat: BiTemporalFeatures, f_diff: Tensor, p: BdamLayerParams, lam: Tensor | float | None = None
) -> tuple[Tensor, Tensor]:
    """Differential cross-temporal attention outputs ``(o_12, o_21)``.

    ``o_12 = (A_12 - lam A_21) V_T2`` is the response for the T1 stream and
    ``o_21 = (A_21 - lam A_12) V_T1`` the one for T2.
    """
    lam = p.lam if lam is None else T.as_tensor(lam)
    a12, a21 = bidirectional_attention_maps(x_hat, f_diff, p)
    v2 = p.v_12(x_hat.f_t2)
    v1 = p.v_21(x_hat.f_t1)
    o12 = T.matmul(a12 - a21 * lam, v2)
    o21 = T.matmul(a21 - a12 * lam, v1)
    return o12, o21


def gated_fusion(original: Tensor, attended: Tensor, gate: GatedFusion) -> Tensor:
    """Per-channel convex blend ``g * attended + (1 - g) * original``."""
    if original.shape != attended.shape:
        raise T.ShapeError(f"gated_fusion: {original.shape} vs {attended.shape}")
    g = T.sigmoid(gate.proj(T.concat([original, attended], axis=-1)))
    return g * attended + (1.0 - g) * original


def bdam_layer(x: BiTemporalFeatures, p: BdamLayerParams) -> BiTemporalFeatures:
    x_hat, f_diff = feature_conditioning(x, p)
    x_hat = BiTemporalFeatures(p.norm_dfc_t1(x_hat.f_t1), p.norm_dfc_t2(x_hat.f_t2), x.grid)
    o12, o21 = bidirectional_diff_attention(x_hat, f_diff, p)
    out_t1 = p.norm_out_t1(gated_fusion(x_hat.f_t1, o12, p.gate_t1))
    out_t2 = p.norm_out_t2(gated_fusion(x_hat.f_t2, o21, p.gate_t2))
    return BiTemporalFeatures(out_t1, out_t2, x.grid)


def bdam_forward(x: BiTemporalFeatures, layers: list[BdamLayerParams], return_all: bool = False):
    """Run the stack; with ``return_all`` also return every intermediate pair."""
    if not layers:
        raise ValueError("bdam_forward needs at least one layer")
    trace = [x]
    for layer in layers:
        x = bdam_layer(x, layer)
        trace.append(x)
    return (x, trace) if return_all else x


class Bdam(Module):
    def __init__(self, d: int, n_layers: int, rng: np.random.Generator, d_hidden: int | None = None, tied: bool = False):
        if n_layers < 1:
            raise ValueError("BDAM depth must be >= 1")
        self.layers = [BdamLayerParams(d, rng, d_hidden=d_hidden, tied=tied) for _ in range(n_layers)]

    def forward(self, x: BiTemporalFeatures, return_all: bool = False):
        return bdam_forward(x, self.layers, return_all=return_all)
