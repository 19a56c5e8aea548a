import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hisem import tensor as T
from hisem.tensor import ShapeError, Tensor


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _weighted(out: Tensor, seed: int) -> Tensor:
    # random projection so every output coordinate matters
    r = np.random.default_rng(seed).normal(size=out.shape)
    return T.tsum(T.mul(out, Tensor(r)))


SHAPES = [(3, 4), (2, 3, 5), (4, 1, 6)]


UNARY_OPS = {
    "abs": T.tabs,
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "silu": T.silu,
    "exp": T.exp,
    "log": lambda x: T.log(T.tabs(x)),
    "scale": lambda x: T.scale(x, -1.7),
    "softmax": T.softmax_lastdim,
    "sum_axis": lambda x: T.tsum(x, axis=-1),
    "mean_all": lambda x: T.mean(x),
    "transpose": lambda x: T.transpose(x),
    "reshape": lambda x: T.reshape(x, (-1,)),
    "diag_embed": T.diag_embed,
    "getitem": lambda x: T.getitem(x, (..., np.array([0, 0, 1]))),
    "masked_softmax": lambda x: T.masked_softmax(x, np.arange(x.shape[-1]) % 3 != 1),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
@pytest.mark.parametrize("shape", SHAPES)
def test_unary_op_gradients(name, shape):
    rng = np.random.default_rng(zlib.crc32(f"{name}{shape}".encode()))
    x = T.param(_away_from_zero(rng, shape))
    err = T.grad_check(lambda a: _weighted(UNARY_OPS[name](a), 7), [x])
    assert err < 1e-4


BINARY_OPS = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": lambda a, b: T.div(a, T.add(T.tabs(b), 0.5)),
    "concat": lambda a, b: T.concat([a, b], axis=-1),
    "stack": lambda a, b: T.stack([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
@pytest.mark.parametrize("shape", SHAPES)
def test_binary_op_gradients(name, shape):
    rng = np.random.default_rng(len(name) * 31 + len(shape))
    a = T.param(_away_from_zero(rng, shape))
    b = T.param(_away_from_zero(rng, shape))
    err = T.grad_check(lambda x, y: _weighted(BINARY_OPS[name](x, y), 3), [a, b])
    assert err < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matmul_layouts_gradients(seed):
    rng = np.random.default_rng(seed)
    cases = [
        (rng.normal(size=(3, 4)), rng.normal(size=(4, 5))),
        (rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))),
        (rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 3))),
    ]
    for a, b in cases:
        pa, pb = T.param(a), T.param(b)
        assert T.grad_check(lambda x, y: _weighted(T.matmul(x, y), seed), [pa, pb]) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_expand_layer_norm_conv_ce_gradients(seed):
    rng = np.random.default_rng(seed)
    v = T.param(rng.normal(size=(1, 4)))
    assert T.grad_check(lambda x: _weighted(T.expand(x, (2, 3, 4)), seed), [v]) < 1e-4

    x = T.param(rng.normal(size=(2, 3, 6)))
    g = T.param(rng.normal(size=6))
    b = T.param(rng.normal(size=6))
    assert T.grad_check(lambda a, c, d: _weighted(T.layer_norm(a, c, d), seed), [x, g, b]) < 1e-4

    img = T.param(rng.normal(size=(2, 3, 4, 2)))
    w = T.param(rng.normal(size=(3, 3, 2, 3)) * 0.3)
    bias = T.param(rng.normal(size=3))
    assert T.grad_check(lambda a, c, d: _weighted(T.conv3x3(a, c, d), seed), [img, w, bias]) < 1e-4

    logits = T.param(rng.normal(size=(3, 5, 7)))
    targets = rng.integers(0, 7, size=(3, 5))
    weights = (rng.random((3, 5)) > 0.3).astype(float)
    weights[0, 0] = 1.0
    assert T.grad_check(lambda z: T.cross_entropy(z, targets, weights), [logits]) < 1e-5


def test_grad_check_exact_for_linear_map():
    rng = np.random.default_rng(0)
    x = T.param(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(3, 2)))
    assert T.grad_check(lambda a: _weighted(T.matmul(a, w), 1), [x]) < 1e-9


def test_backward_simple_identities():
    x = T.param(np.arange(6.0).reshape(2, 3))
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    y = T.param(np.array([1.0, -2.0, 3.0]))
    T.tsum(T.mul(y, y)).backward()
    np.testing.assert_array_equal(y.grad, 2 * y.data)


def test_backward_accumulates_without_zeroing():
    x = T.param(np.ones(3))
    T.tsum(x).backward()
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_backward_needs_scalar():
    x = T.param(np.ones(3))
    with pytest.raises((ValueError, ShapeError)):
        T.scale(x, 2.0).backward()


def test_shared_subexpression_gradient():
    # x feeds two branches; reverse-order replay must sum both contributions
    x = T.param(np.array([0.3, -1.2]))
    h = T.sigmoid(x)
    loss = T.tsum(T.add(T.mul(h, h), T.scale(h, 3.0)))
    loss.backward()
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, (2 * s + 3) * s * (1 - s), rtol=1e-12)


def test_abs_subgradient_at_zero():
    x = T.param(np.array([0.0, 2.0, -3.0]))
    T.tsum(T.tabs(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, -1.0])


def test_no_broadcast_beyond_scalars():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    out = T.add(Tensor(np.ones((2, 3))), 2.0)
    np.testing.assert_array_equal(out.data, 3 * np.ones((2, 3)))


def test_scalar_operand_gradient_is_summed():
    x = T.param(np.ones((2, 2)))
    s = T.param(np.array(2.0))
    T.tsum(T.mul(x, s)).backward()
    assert s.grad.shape == () and s.grad == 4.0


def test_no_grad_records_nothing():
    x = T.param(np.ones(2))
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad


@pytest.mark.parametrize(
    "scores,k,expected",
    [([0.1, 0.5, 0.2, 0.9], 2, [3, 1]), ([0.7, 0.7], 1, [0]), ([1, 2, 3], 3, [2, 1, 0])],
)
def test_top_k_examples(scores, k, expected):
    assert T.top_k(scores, k)[0] == expected
    assert T.top_k_rows(np.array([scores], dtype=float), k)[0].tolist() == expected


def test_top_k_rejects_k_above_n():
    with pytest.raises(ValueError):
        T.top_k([1.0, 2.0], 3)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.integers(2, 12), elements=st.integers(-3, 3).map(float)),
    st.integers(1, 3),
    st.integers(1, 4),
)
def test_top_k_stable_under_appending_smaller(scores, k, extra):
    k = min(k, scores.size)
    idx, vals = T.top_k(scores, k)
    kth = vals[-1]
    bigger = np.concatenate([scores, np.full(extra, kth - 1.0)])
    assert T.top_k(bigger, k)[0] == idx
    np.testing.assert_array_equal(T.top_k_rows(bigger[None], k)[0], idx)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = T.softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax_lastdim(Tensor(x + c)).data, y, atol=1e-12)


def test_masked_softmax_exact_zeros():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 4)))
    mask = np.array([True, False, True, False])
    y = T.masked_softmax(x, mask).data
    assert np.all(y[:, ~mask] == 0.0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_forward_bit_deterministic():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 4, 5)))
        w = Tensor(rng.normal(size=(5, 5)))
        return T.layer_norm(T.matmul(x, w), Tensor(np.ones(5)), Tensor(np.zeros(5))).data

    assert run().tobytes() == run().tobytes()


def test_batched_matmul_matches_per_sample():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 7, 16))
    w = Tensor(rng.normal(size=(16, 9)))
    full = T.matmul(Tensor(x), w).data
    for i in range(6):
        assert T.matmul(Tensor(x[i : i + 1]), w).data[0].tobytes() == full[i].tobytes()


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 3, 11)))
    loss = T.cross_entropy(logits, np.zeros((2, 3), dtype=int))
    assert loss.item() == pytest.approx(np.log(11), abs=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.expand(Tensor(np.ones((2, 3))), (3, 3))
    with pytest.raises(ShapeError):
        T.conv3x3(Tensor(np.ones((3, 3, 2))), Tensor(np.ones((3, 3, 4, 1))), Tensor(np.ones(1)))
