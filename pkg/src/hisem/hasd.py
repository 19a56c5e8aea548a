"""Hierarchical adaptive semantic disentanglement.

An image-level router decides, per image pair, between the *changed* and the
*unchanged* path. Both paths start from a convolutional fusion of the two
streams. Changed pairs go through a group-constrained sparse mixture of
SwiGLU experts plus an always-on shared expert; unchanged pairs go through a
plain residual FFN.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import tensor as T
from .bdam import BiTemporalFeatures
from .nn import Conv3x3, Linear, Module, SwiGLU, glorot
from .tensor import Tensor


class Path(IntEnum):
    UNCHANGED = 0
    CHANGED = 1


@dataclass
class MoEConfig:
    num_experts: int = 8
    num_groups: int = 4
    groups_topk: int = 2
    experts_topk: int = 2
    num_shared_experts: int = 1
    expert_hidden_dim: int = 64

    def __post_init__(self):
        self.validate()

    @property
    def group_size(self) -> int:
        return self.num_experts // self.num_groups

    def validate(self) -> None:
        if self.num_experts < 1 or self.num_groups < 1:
            raise ValueError("num_experts and num_groups must be positive")
        if self.num_experts % self.num_groups:
            raise ValueError(f"num_experts={self.num_experts} is not divisible by num_groups={self.num_groups}")
        if not 1 <= self.groups_topk <= self.num_groups:
            raise ValueError(f"groups_topk={self.groups_topk} must lie in [1, {self.num_groups}]")
        if not 1 <= self.experts_topk <= self.groups_topk * self.group_size:
            raise ValueError(
                f"experts_topk={self.experts_topk} exceeds the {self.groups_topk * self.group_size} experts "
                "reachable through the selected groups"
            )
        if self.num_shared_experts < 0:
            raise ValueError("num_shared_experts must be >= 0")


@dataclass
class RoutingDecision:
    """Routing outcome for one image pair."""

    path: Path
    path_probs: np.ndarray
    source: str = "predicted"
    # per token: list of (expert index, weight); empty on the unchanged path
    token_experts: list[list[tuple[int, float]]] = field(default_factory=list)


# ------------------------------------------------------------------ image level
def image_level_route(x: BiTemporalFeatures, w_g: Tensor) -> tuple[Tensor, list[RoutingDecision]]:
    """Route logits ``GAP(F_T2 - F_T1) W_g`` and the per-pair top-1 decision.

    Equal logits resolve to the unchanged path (index 0).
    """
    pooled = T.mean(x.f_t2 - x.f_t1, axis=-2)
    squeeze = pooled.ndim == 1
    if squeeze:
        pooled = pooled.reshape(1, pooled.shape[0])
    logits = T.matmul(pooled, w_g)
    decisions = [decision_from_logits(row) for row in logits.data]
    if squeeze:
        logits = logits.reshape(logits.shape[-1])
    return logits, decisions


def decision_from_logits(logits, override: int | None = None) -> RoutingDecision:
    z = np.asarray(logits, dtype=T.DTYPE).reshape(-1)
    p = np.exp(z - z.max())
    p /= p.sum()
    if override is None:
        return RoutingDecision(Path(T.top_k(p, 1)[0][0]), p, "predicted")
    if override not in (0, 1):
        raise ValueError(f"routing override must be 0 or 1, got {override!r}")
    return RoutingDecision(Path(override), p, "ground_truth")


def routing_loss(logits: Tensor, labels) -> Tensor:
    """Cross-entropy of the route logits against change labels, averaged over the batch."""
    labels = np.atleast_1d(np.asarray(labels))
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError(f"change labels must be 0 or 1, got {labels.tolist()}")
    if logits.ndim == 1:
        logits = logits.reshape(1, logits.shape[0])
    return T.cross_entropy(logits, labels.astype(np.int64))


# ------------------------------------------------------------------ token level
class FusionBlock(Module):
    """Channel concat -> 1x1 conv -> residual 3x3 conv -> ReLU."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.reduce = Linear(2 * d, d, rng)
        self.conv = Conv3x3(d, d, rng)

    def forward(self, x: BiTemporalFeatures) -> Tensor:
        return fusion_block(x, self)


def fusion_block(x: BiTemporalFeatures, p: FusionBlock) -> Tensor:
    h = p.reduce(T.concat([x.f_t1, x.f_t2], axis=-1))
    return T.relu(h + p.conv(h, x.grid))


def expert_scores(f_h: Tensor, w_c: Tensor) -> Tensor:
    return T.sigmoid(T.matmul(f_h, w_c))


def group_constrained_select(scores, cfg: MoEConfig) -> tuple[np.ndarray, np.ndarray]:
    """Pick experts per token under the group constraint.

    ``scores`` is ``[N, E]``. Each contiguous block of ``E / G`` experts is a
    group scored by its maximum; the top ``groups_topk`` groups survive, the
    rest are masked to ``-inf``, and the top ``experts_topk`` survivors are
    chosen. Ties go to the lower index at both stages.

    Returns ``(experts [N, k], weights [N, k])`` with weights summing to one.
    """
    cfg.validate()
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=T.DTYPE)
    if s.ndim != 2 or s.shape[1] != cfg.num_experts:
        raise T.ShapeError(f"expected scores [N, {cfg.num_experts}], got {s.shape}")
    n = s.shape[0]
    group_scores = s.reshape(n, cfg.num_groups, cfg.group_size).max(axis=-1)
    groups = T.top_k_rows(group_scores, cfg.groups_topk)
    keep = np.zeros((n, cfg.num_groups), dtype=bool)
    np.put_along_axis(keep, groups, True, axis=-1)
    masked = np.where(np.repeat(keep, cfg.group_size, axis=-1), s, -np.inf)
    experts = T.top_k_rows(masked, cfg.experts_topk)
    chosen = np.take_along_axis(s, experts, axis=-1)
    total = chosen.sum(axis=-1, keepdims=True)
    # all-zero selections (only reachable with hand-made scores) share weight evenly
    uniform = np.full_like(chosen, 1.0 / cfg.experts_topk)
    return experts, np.where(total > 0, chosen / np.where(total > 0, total, 1.0), uniform)


def routing_weights(scores: Tensor, experts: np.ndarray) -> Tensor:
    """Dense ``[N, E]`` routing weights, differentiable in ``scores``.

    Non-selected experts get exactly zero; selected ones get their score
    renormalised over the selection.
    """
    mask = np.zeros(scores.shape, dtype=T.DTYPE)
    np.put_along_axis(mask, experts, 1.0, axis=-1)
    kept = scores * T.Tensor(mask)
    total = T.tsum(kept, axis=-1, keepdims=True).expand(scores.shape)
    return T.div(kept, total)


class ExpertParams(Module):
    def __init__(self, d: int, cfg: MoEConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.w_c = T.param(glorot(rng, d, cfg.num_experts))
        self.experts = [SwiGLU(d, cfg.expert_hidden_dim, rng) for _ in range(cfg.num_experts)]
        self.shared = [SwiGLU(d, cfg.expert_hidden_dim, rng) for _ in range(cfg.num_shared_experts)]


def moe_forward(f_h: Tensor, weights: Tensor, p: ExpertParams) -> Tensor:
    """Mixture ``sum_e w_e f_e(x) + f_s(x)`` over tokens ``f_h`` (``[..., L, D]``).

    ``weights`` is the dense ``[..., L, E]`` routing-weight tensor, zero
    outside each token's selected experts. An expert nobody selected is
    skipped; a selected expert is evaluated on the whole token block and its
    output scaled by the (mostly zero) weight column. Products are then
    summed in ascending expert order, so the result is bit-identical to the
    plain dense mixture and independent of batch composition.
    """
    if weights.shape != f_h.shape[:-1] + (p.cfg.num_experts,):
        raise T.ShapeError(f"routing weights {weights.shape} do not match tokens {f_h.shape}")
    w = weights.data
    active = w != 0
    sums = w.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("routing weights of every token must sum to 1")
    out = None
    for e, expert in enumerate(p.experts):
        if not active[..., e].any():
            continue
        alpha = weights[..., e : e + 1].expand(f_h.shape)
        contrib = expert(f_h) * alpha
        out = contrib if out is None else out + contrib
    for shared in p.shared:
        y = shared(f_h)
        out = y if out is None else out + y
    return out


class UnchangedFFN(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return unchanged_path_ffn(x, self)


def unchanged_path_ffn(f_h: Tensor, p: UnchangedFFN) -> Tensor:
    return f_h + p.fc2(T.relu(p.fc1(f_h)))


class Hasd(Module):
    def __init__(self, d: int, cfg: MoEConfig, rng: np.random.Generator, ffn_hidden: int | None = None):
        self.cfg = cfg
        self.w_g = T.param(glorot(rng, d, 2))
        self.fusion = FusionBlock(d, rng)
        self.moe = ExpertParams(d, cfg, rng)
        self.ffn = UnchangedFFN(d, ffn_hidden or 2 * d, rng)

    def forward(self, x: BiTemporalFeatures, routing_override=None):
        return hasd_forward(x, self, routing_override)


def changed_path(f_h: Tensor, p: Hasd) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Token-level MoE on ``[..., L, D]`` tokens.

    Also returns the expert selection ``[..., L, k]`` and its weights.
    """
    scores = expert_scores(f_h, p.moe.w_c)
    lead = scores.shape[:-1]
    flat = scores.reshape(-1, scores.shape[-1])
    experts, _ = group_constrained_select(flat, p.cfg)
    weights = routing_weights(flat, experts).reshape(scores.shape)
    sel = np.take_along_axis(weights.data.reshape(flat.shape), experts, axis=-1)
    k = experts.shape[-1]
    return moe_forward(f_h, weights, p.moe), experts.reshape(lead + (k,)), sel.reshape(lead + (k,))


def hasd_forward(
    x: BiTemporalFeatures, p: Hasd, routing_override: int | Sequence[int] | None = None
) -> tuple[Tensor, list[RoutingDecision], Tensor]:
    """Route, fuse and dispatch every pair in the batch.

    ``routing_override`` (a single 0/1 or one per pair) replaces the predicted
    path, which is how evaluation with ground-truth routing is done. Pairs are
    grouped by path, each group is processed as a sub-batch and the results
    are put back in input order. Returns ``(tokens, decisions, route_logits)``.
    """
    single = x.f_t1.ndim == 2
    if single:
        x = BiTemporalFeatures(x.f_t1.reshape((1,) + x.f_t1.shape), x.f_t2.reshape((1,) + x.f_t2.shape), x.grid)
    b, l, d = x.f_t1.shape
    logits, _ = image_level_route(x, p.w_g)
    if routing_override is None:
        overrides = [None] * b
    else:
        overrides = [int(o) for o in np.broadcast_to(np.asarray(routing_override, dtype=np.int64), (b,))]
    decisions = [decision_from_logits(row, o) for row, o in zip(logits.data, overrides)]

    f_h = fusion_block(x, p.fusion)
    paths = np.array([int(dec.path) for dec in decisions])
    changed = np.flatnonzero(paths == Path.CHANGED)
    unchanged = np.flatnonzero(paths == Path.UNCHANGED)
    parts, order = [], []
    if changed.size:
        y, experts, sel = changed_path(f_h[changed], p)
        for j, i in enumerate(changed):
            decisions[i].token_experts = [
                list(zip(map(int, e), map(float, a))) for e, a in zip(experts[j], sel[j])
            ]
        parts.append(y)
        order.extend(changed)
    if unchanged.size:
        parts.append(unchanged_path_ffn(f_h[unchanged], p.ffn))
        order.extend(unchanged)
    out = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    out = out[np.argsort(np.asarray(order), kind="stable")]
    if single:
        return out.reshape(l, d), decisions, logits.reshape(2)
    return out, decisions, logits
