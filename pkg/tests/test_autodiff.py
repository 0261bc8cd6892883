import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from prosody_intent import autodiff as ad
from prosody_intent.errors import (
    DegenerateMaskError, DimensionError, InvalidProbabilityError, RankError,
)

TOL = 1e-6


def param(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    return ad.Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)


def weighted(out, w):
    # a random linear functional keeps the check sensitive to every output entry
    return ad.tsum(ad.mul(out, w))


UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "neg": lambda a: -a,
    "scale": lambda a: ad.scale(a, -2.5),
    "sum_axis": lambda a: ad.tsum(a, axis=1, keepdims=True),
    "mean_axis0": lambda a: ad.mean(a, axis=0),
    "reshape": lambda a: ad.reshape(a, (4, 3)),
    "transpose": lambda a: ad.transpose(a),
    "swapaxes": lambda a: ad.swapaxes(a, 0, 1),
    "slice": lambda a: a[1:, ::2],
    "fancy_index": lambda a: a[np.array([0, 2, 0])],
    "softmax": lambda a: ad.softmax_masked(a),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    a = param(rng, 3, 4)
    w = rng.standard_normal(UNARY[name](a).shape)
    assert ad.gradient_check(lambda: weighted(UNARY[name](a), w), [a]) < TOL


def test_log_and_relu_gradients(rng):
    a = param(rng, 3, 4, positive=True)
    assert ad.gradient_check(lambda: ad.tsum(ad.log(a)), [a]) < TOL
    b = ad.Tensor(np.array([[-1.3, 0.4], [2.0, -0.2]]), requires_grad=True)
    assert ad.gradient_check(lambda: ad.tsum(ad.mul(ad.relu(b), b)), [b]) < TOL


def test_relu_subgradient_at_zero_is_zero():
    x = ad.Tensor(np.zeros(3), requires_grad=True)
    ad.backward(ad.tsum(ad.relu(x)))
    assert np.array_equal(x.grad, np.zeros(3))


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul])
def test_broadcasting_binary_gradients(op, rng):
    a = param(rng, 2, 3, 4)
    b = param(rng, 3, 1)
    w = rng.standard_normal((2, 3, 4))
    assert ad.gradient_check(lambda: weighted(op(a, b), w), [a, b]) < TOL


def test_matmul_batched_and_2d(rng):
    a = param(rng, 2, 3, 4)
    b = param(rng, 4, 5)
    c = param(rng, 2, 5, 2)
    w = rng.standard_normal((2, 3, 2))
    assert ad.gradient_check(lambda: weighted(ad.matmul(ad.matmul(a, b), c), w), [a, b, c]) < TOL


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 5))))


def test_concat_stack_where_embedding(rng):
    a, b = param(rng, 2, 3), param(rng, 2, 2)
    w = rng.standard_normal((2, 5))
    assert ad.gradient_check(lambda: weighted(ad.concat([a, b], axis=-1), w), [a, b]) < TOL
    c = param(rng, 2, 3)
    w2 = rng.standard_normal((2, 2, 3))
    assert ad.gradient_check(lambda: weighted(ad.stack([a, c], axis=1), w2), [a, c]) < TOL
    cond = rng.random((2, 3)) > 0.5
    assert ad.gradient_check(lambda: weighted(ad.where(cond, a, c), w2[:, 0]), [a, c]) < TOL
    table = param(rng, 4, 3)
    ids = np.array([[0, 3, 3], [1, 0, 2]])
    w3 = rng.standard_normal((2, 3, 3))
    assert ad.gradient_check(lambda: weighted(ad.embedding(table, ids), w3), [table]) < TOL


def test_masked_softmax_zeroes_and_gradient(rng):
    x = param(rng, 3, 5)
    mask = np.array([[1, 1, 0, 1, 0], [1, 0, 0, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    p = ad.softmax_masked(x, mask)
    assert np.all(p.data[~mask] == 0.0)
    assert np.allclose(p.data.sum(axis=-1), 1.0)
    w = rng.standard_normal((3, 5))
    assert ad.gradient_check(lambda: weighted(ad.softmax_masked(x, mask), w), [x]) < TOL


def test_masked_softmax_rejects_fully_masked_row():
    with pytest.raises(DegenerateMaskError):
        ad.softmax_masked(ad.Tensor(np.ones((2, 3))), np.array([[1, 1, 1], [0, 0, 0]], dtype=bool))


def test_layer_norm_gradient_and_statistics(rng):
    x, g, b = param(rng, 2, 3, 6), param(rng, 6), param(rng, 6)
    w = rng.standard_normal((2, 3, 6))
    assert ad.gradient_check(lambda: weighted(ad.layer_norm(x, g, b), w), [x, g, b]) < TOL
    y = ad.layer_norm(x, ad.Tensor(np.ones(6)), ad.Tensor(np.zeros(6))).data
    assert np.allclose(y.mean(-1), 0.0) and np.allclose(y.var(-1), 1.0, atol=1e-4)


def test_cross_entropy_matches_direct_formula_and_gradient(rng):
    logits = param(rng, 2, 4, 3)
    targets = rng.integers(0, 3, (2, 4))
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
    loss = ad.cross_entropy_masked(logits, targets, mask)
    z = logits.data
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    expect = -np.mean([logp[b, t, targets[b, t]] for b, t in zip(*np.nonzero(mask))])
    assert loss.item() == pytest.approx(expect, rel=1e-12)
    assert ad.gradient_check(lambda: ad.cross_entropy_masked(logits, targets, mask), [logits]) < TOL


def test_cross_entropy_is_stable_for_large_logits():
    logits = ad.Tensor(np.array([[1000.0, -1000.0, 0.0]]))
    loss = ad.cross_entropy_masked(logits, np.array([1]), np.array([True]))
    assert loss.item() == pytest.approx(2000.0)


def test_cross_entropy_errors():
    with pytest.raises(DegenerateMaskError):
        ad.cross_entropy_masked(ad.Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))
    with pytest.raises(DimensionError):
        ad.cross_entropy_masked(ad.Tensor(np.zeros((1, 2, 3))), np.zeros((1, 3), int), np.ones((1, 3), bool))


def test_dropout_modes(rng):
    x = ad.Tensor(rng.standard_normal((200, 50)))
    assert ad.dropout(x, 0.4, training=False, rng=rng) is x
    y = ad.dropout(x, 0.4, training=True, rng=np.random.default_rng(0)).data
    kept = y != 0
    assert 0.55 < kept.mean() < 0.65
    assert np.allclose(y[kept], x.data[kept] / 0.6)
    for p in (-0.1, 1.0, 1.5):
        with pytest.raises(InvalidProbabilityError):
            ad.dropout(x, p, training=True, rng=rng)


def test_backward_requires_scalar():
    with pytest.raises(RankError):
        ad.backward(ad.Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_backward_accumulates_and_zero_grad_resets():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        ad.backward(ad.tsum(x * x))
    assert np.allclose(x.grad, 4 * x.data)
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_gradient_sums_paths():
    x = ad.Tensor(np.array([0.3, -0.7]), requires_grad=True)
    y = ad.tanh(x)
    ad.backward(ad.tsum(y * y + y))
    t = np.tanh(x.data)
    assert np.allclose(x.grad, (2 * t + 1) * (1 - t * t))


def test_graph_ids_are_topological(rng):
    a, b = param(rng, 3), param(rng, 3)
    out = ad.tsum(ad.tanh(a * b) + a)
    g = ad.Graph.from_output(out)
    assert g.is_acyclic()
    assert [n.id for n in g.nodes] == sorted(n.id for n in g.nodes)


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert y._node is None and not y.requires_grad


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_product_rule_property(xa, xb):
    a, b = ad.Tensor(xa.copy(), requires_grad=True), ad.Tensor(xb.copy(), requires_grad=True)
    ad.backward(ad.tsum(a * b))
    assert np.array_equal(a.grad, xb) and np.array_equal(b.grad, xa)


@given(arrays(np.float64, (2, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax_masked(ad.Tensor(x)).data
    assert np.all(p >= 0) and np.allclose(p.sum(-1), 1.0)
