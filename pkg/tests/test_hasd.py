import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hisem import tensor as T
from hisem.bdam import BiTemporalFeatures
from hisem.hasd import (
    Hasd,
    MoEConfig,
    Path,
    changed_path,
    decision_from_logits,
    expert_scores,
    group_constrained_select,
    hasd_forward,
    image_level_route,
    moe_forward,
    routing_loss,
    routing_weights,
)
from hisem.tensor import Tensor

GRID = (2, 2)
D = 6


def brute_force_select(row, cfg):
    """Enumerate every admissible group set; return the expected expert set."""
    gs = cfg.group_size
    group_score = [max(row[g * gs : (g + 1) * gs]) for g in range(cfg.num_groups)]
    # top groups: descending score, ascending index on ties
    ranked_groups = sorted(range(cfg.num_groups), key=lambda g: (-group_score[g], g))[: cfg.groups_topk]
    allowed = [e for g in ranked_groups for e in range(g * gs, (g + 1) * gs)]
    chosen = sorted(allowed, key=lambda e: (-row[e], e))[: cfg.experts_topk]
    return chosen, set(ranked_groups)


def dense_mixture(f_h, weights, moe):
    out = np.zeros_like(f_h)
    for e, expert in enumerate(moe.experts):
        with T.no_grad():
            y = expert(Tensor(f_h)).data
        out = out + y * weights[..., e : e + 1]
    for shared in moe.shared:
        with T.no_grad():
            out = out + shared(Tensor(f_h)).data
    return out


def _hasd(seed, cfg=None, d=D):
    return Hasd(d, cfg or MoEConfig(expert_hidden_dim=5), np.random.default_rng(seed), ffn_hidden=7)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.sampled_from([(8, 4, 2, 2), (8, 2, 1, 3), (6, 3, 2, 1), (4, 4, 3, 2), (9, 3, 3, 9)]),
)
def test_group_selection_matches_brute_force(seed, shape):
    e, g, kg, k = shape
    cfg = MoEConfig(num_experts=e, num_groups=g, groups_topk=kg, experts_topk=k)
    rng = np.random.default_rng(seed)
    # coarse values make ties frequent
    scores = rng.integers(0, 4, size=(5, e)) / 4.0
    experts, weights = group_constrained_select(scores, cfg)
    for row, sel, w in zip(scores, experts, weights):
        want, groups = brute_force_select(row, cfg)
        assert sel.tolist() == want
        assert {int(x) // cfg.group_size for x in sel} <= groups
        assert abs(w.sum() - 1.0) <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_moe_forward_equals_dense_mixture_exactly(seed):
    rng = np.random.default_rng(seed)
    p = _hasd(seed)
    f_h = rng.normal(size=(3, 4, D))
    scores = expert_scores(Tensor(f_h), p.moe.w_c)
    flat = scores.reshape(-1, p.cfg.num_experts)
    experts, _ = group_constrained_select(flat, p.cfg)
    weights = routing_weights(flat, experts).reshape(scores.shape)
    with T.no_grad():
        got = moe_forward(Tensor(f_h), weights, p.moe).data
    want = dense_mixture(f_h, weights.data, p.moe)
    assert got.tobytes() == want.tobytes()
    active = (weights.data != 0).sum(axis=-1)
    assert np.all(active == p.cfg.experts_topk)
    np.testing.assert_allclose(weights.data.sum(-1), 1.0, atol=1e-9)


def test_moe_forward_rejects_unnormalised_weights():
    p = _hasd(0)
    w = np.zeros((2, p.cfg.num_experts))
    w[:, 0] = 0.5
    with pytest.raises(ValueError):
        moe_forward(Tensor(np.ones((2, D))), Tensor(w), p.moe)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_changed_path_gradients(seed):
    rng = np.random.default_rng(seed)
    p = _hasd(seed)
    f_h = T.param(rng.normal(size=(2, 4, D)))
    r = Tensor(rng.normal(size=(2, 4, D)))
    params = p.moe.parameters()

    def f(x, *_):
        y, _, _ = changed_path(x, p)
        return T.tsum(y * r)

    assert T.grad_check(f, [f_h] + params) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_hasd_gradients_both_paths(seed):
    rng = np.random.default_rng(seed + 20)
    p = _hasd(seed)
    a = T.param(rng.normal(size=(2, 4, D)))
    b = T.param(rng.normal(size=(2, 4, D)))
    r = Tensor(rng.normal(size=(2, 4, D)))
    labels = np.array([1, 0])

    def f(x1, x2, *_):
        out, _, logits = hasd_forward(BiTemporalFeatures(x1, x2, GRID), p, routing_override=labels)
        return T.tsum(out * r) + routing_loss(logits, labels)

    assert T.grad_check(f, [a, b] + p.parameters()) < 1e-4


def test_route_tie_goes_to_unchanged():
    d = decision_from_logits(np.array([0.3, 0.3]))
    assert d.path == Path.UNCHANGED and d.source == "predicted"
    assert decision_from_logits(np.array([0.0, 1.0]), override=0).path == Path.UNCHANGED
    assert decision_from_logits(np.array([0.0, 1.0]), override=0).source == "ground_truth"
    with pytest.raises(ValueError):
        decision_from_logits(np.zeros(2), override=2)


def test_identical_streams_give_zero_logits():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4, D)))
    w = Tensor(np.random.default_rng(1).normal(size=(D, 2)))
    logits, decisions = image_level_route(BiTemporalFeatures(x, x, GRID), w)
    assert np.all(logits.data == 0.0)
    assert all(dec.path == Path.UNCHANGED for dec in decisions)


def test_dispatch_matches_per_pair_and_records_experts():
    rng = np.random.default_rng(3)
    p = _hasd(4)
    a = Tensor(rng.normal(size=(5, 4, D)))
    b = Tensor(rng.normal(size=(5, 4, D)))
    labels = np.array([1, 0, 1, 1, 0])
    with T.no_grad():
        out, decisions, _ = hasd_forward(BiTemporalFeatures(a, b, GRID), p, labels)
        for i in range(5):
            one, dec, _ = hasd_forward(BiTemporalFeatures(a[i], b[i], GRID), p, int(labels[i]))
            assert one.data.tobytes() == out.data[i].tobytes()
            assert dec[0].path == decisions[i].path
    for dec, lab in zip(decisions, labels):
        assert dec.source == "ground_truth" and int(dec.path) == lab
        if lab:
            assert len(dec.token_experts) == 4
            assert all(len(tok) == p.cfg.experts_topk for tok in dec.token_experts)
            assert all(abs(sum(w for _, w in tok) - 1) < 1e-9 for tok in dec.token_experts)
        else:
            assert dec.token_experts == []


def test_routing_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        routing_loss(Tensor(np.zeros((1, 2))), [2])


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(num_experts=8, num_groups=3),
        dict(groups_topk=5),
        dict(num_groups=4, groups_topk=1, experts_topk=3),
        dict(num_shared_experts=-1),
    ],
)
def test_moe_config_validation(kwargs):
    with pytest.raises(ValueError):
        MoEConfig(**kwargs)


def test_group_selection_exhaustive_small():
    # every score pattern over {0, 1} for 4 experts in 2 groups
    cfg = MoEConfig(num_experts=4, num_groups=2, groups_topk=1, experts_topk=2)
    for bits in itertools.product([0.25, 0.75], repeat=4):
        row = np.array([bits])
        sel, _ = group_constrained_select(row, cfg)
        assert sel[0].tolist() == brute_force_select(row[0], cfg)[0]
