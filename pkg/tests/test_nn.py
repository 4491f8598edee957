import math

import numpy as np
import pytest

from hmilnet import nn


def test_dense_identity():
    x = np.arange(6.0).reshape(2, 3)
    y, _ = nn.dense_forward(np.eye(3), np.zeros(3), x, "identity")
    assert np.array_equal(y, x)


def test_relu_blocks_negative_inputs():
    x = -np.ones((2, 3))
    y, c = nn.dense_forward(np.eye(3), np.zeros(3), x, "relu")
    assert np.all(y == 0)
    dx, dW, db = nn.dense_backward(np.eye(3), c, np.ones((2, 3)))
    assert np.all(dx == 0) and np.all(dW == 0) and np.all(db == 0)


def test_dense_shape_error():
    with pytest.raises(ValueError):
        nn.dense_forward(np.eye(3), np.zeros(3), np.ones((2, 4)))


@pytest.mark.parametrize("act", nn.ACTIVATIONS)
def test_dense_gradients(act, rng):
    W = rng.normal(size=(4, 3))
    b = rng.normal(size=4)
    x = rng.normal(size=(5, 3))
    up = rng.normal(size=(5, 4))

    def f():
        return float((nn.dense_forward(W, b, x, act)[0] * up).sum())

    _, c = nn.dense_forward(W, b, x, act)
    dx, dW, db = nn.dense_backward(W, c, up)
    for analytic, var in ((dx, x), (dW, W), (db, b)):
        assert nn.rel_error(analytic, nn.numeric_grad(f, var)) < 1e-4


def _block(dim, theta_r=1.0, theta_p=2.0, theta_c=0.0):
    return nn.AggregationBlock(dim, np.full(dim, nn.softplus_inv(theta_r)),
                               np.full(dim, nn.softplus_inv(theta_p - 1.0)), np.full(dim, theta_c))


def test_default_parameters():
    b = nn.AggregationBlock(3)
    np.testing.assert_allclose(b.theta_r, 1.0)
    np.testing.assert_allclose(b.theta_p, 2.0)
    assert np.all(b.theta_c == 0)


def test_singleton_collapse(rng):
    x = rng.normal(size=4)
    blk = _block(4, theta_r=3.0, theta_p=1.7, theta_c=0.3)
    out = nn.aggregate(blk, x[None, :], [2.5])
    mean, mx, lse, pn = np.split(out, 4)
    np.testing.assert_allclose(mean, x)
    np.testing.assert_allclose(mx, x)
    np.testing.assert_allclose(lse, x, atol=1e-12)
    np.testing.assert_allclose(pn, np.abs(x - 0.3), atol=1e-9)


def test_lse_of_zeros():
    out = nn.aggregate(_block(1), np.zeros((2, 1)))
    assert out[2] == 0.0


def test_pnorm_three_four():
    out = nn.aggregate(_block(1), np.array([[3.0], [4.0]]))
    assert math.isclose(out[3], math.sqrt(12.5), rel_tol=1e-9)
    assert abs(out[3] - 3.5355) < 1e-4
    assert out[0] == 3.5 and out[1] == 4.0


def test_lse_approaches_max(rng):
    x = rng.normal(size=(7, 3))
    out = nn.aggregate(_block(3, theta_r=50.0), x)
    gap = np.abs(out[6:9] - x.max(axis=0))
    assert np.all(gap <= np.log(7) / 50 + 1e-12)


def test_aggregate_rejects_empty_and_bad_weights():
    with pytest.raises(ValueError):
        nn.aggregate(_block(2), np.empty((0, 2)))
    with pytest.raises(ValueError):
        nn.aggregate(_block(2), np.ones((2, 2)), [1.0, 0.0])


def test_duplicate_half_weight_keeps_mean(rng):
    x = rng.normal(size=(4, 3))
    w = np.array([1.0, 2.0, 2.0, 1.0])
    a = nn.aggregate(_block(3), x, w)
    x2 = np.vstack([x, x[1:2]])
    w2 = np.array([1.0, 1.0, 2.0, 1.0, 1.0])
    b = nn.aggregate(_block(3), x2, w2)
    assert np.max(np.abs(a[:3] - b[:3])) < 1e-9
    assert np.max(np.abs(a[9:] - b[9:])) < 1e-9


def test_max_gradient_goes_to_first_argmax():
    z = np.array([[1.0], [2.0], [2.0], [0.0]])
    blk = _block(1)
    _, _, cache = nn.aggregate_forward(z, np.array([0, 4]), np.ones(4), blk.rho_r, blk.rho_p,
                                       blk.theta_c)
    dout = np.array([[0.0, 1.0, 0.0, 0.0]])
    dz, *_ = nn.aggregate_backward(cache, dout)
    assert dz.ravel().tolist() == [0.0, 1.0, 0.0, 0.0]


def aggregation_grad_errors(rng, dim=3, sizes=(3, 0, 1, 4)):
    offsets = np.r_[0, np.cumsum(sizes)]
    z = rng.normal(size=(offsets[-1], dim))
    w = rng.uniform(0.5, 3.0, size=offsets[-1])
    rho_r, rho_p, theta_c = (rng.normal(size=dim) for _ in range(3))
    nonempty = np.count_nonzero(np.diff(offsets))
    up = rng.normal(size=(nonempty, 4 * dim))

    def f():
        out, _, _ = nn.aggregate_forward(z, offsets, w, rho_r, rho_p, theta_c)
        return float((out * up).sum())

    _, _, cache = nn.aggregate_forward(z, offsets, w, rho_r, rho_p, theta_c)
    grads = nn.aggregate_backward(cache, up)
    return [nn.rel_error(g, nn.numeric_grad(f, v)) for g, v in zip(grads, (z, rho_r, rho_p, theta_c))]


def test_aggregation_gradients(rng):
    for _ in range(5):
        assert max(aggregation_grad_errors(rng)) < 1e-4


def test_bce_examples():
    loss, _ = nn.weighted_bce(np.array([[0.0, 60.0]]), np.array([1]))
    assert loss < 1e-20
    # p(y=1) = e^-1
    p = math.exp(-1)
    logits = np.array([[math.log(1 - p), math.log(p)]])
    loss, _ = nn.weighted_bce(logits, np.array([1]))
    assert math.isclose(loss, 0.1, rel_tol=1e-12)


def test_bce_finite_for_extreme_logits():
    loss, g = nn.weighted_bce(np.array([[1e4, -1e4], [-800.0, 800.0]]), np.array([1, 0]))
    assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_bce_gradient(rng):
    logits = rng.normal(size=(6, 2))
    labels = rng.integers(0, 2, size=6)
    _, g = nn.weighted_bce(logits, labels)
    num = nn.numeric_grad(lambda: nn.weighted_bce(logits, labels)[0], logits)
    assert nn.rel_error(g, num) < 1e-4


def test_glorot_variance():
    W = nn.glorot_init(1000, 1000, np.random.default_rng(0))
    assert abs(W.var() / (2 / 2000) - 1) < 0.1


def test_adam_zero_gradient_and_descent():
    params = {"w": np.array([1.0])}
    st = nn.AdamState()
    nn.adam_step(st, params, {"w": np.array([0.0])})
    assert params["w"][0] == 1.0
    nn.adam_step(st, params, {"w": 2 * params["w"]})
    assert params["w"][0] ** 2 < 1.0
