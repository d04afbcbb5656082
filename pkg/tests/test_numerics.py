import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_diff

from shapegnn.errors import DimensionError, NumericalError
from shapegnn.numerics import AdamState, adam_step, dropout, masked_mse, relu, spmm


def test_spmm_identity_and_zero(rng):
    x = rng.normal(size=(5, 3))
    assert np.array_equal(spmm(sp.identity(5, format="csr"), x), x)
    assert np.array_equal(spmm(sp.csr_matrix((5, 5)), x), np.zeros((5, 3)))


def test_spmm_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        spmm(sp.identity(4, format="csr"), rng.normal(size=(5, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 100), st.integers(1, 8), st.floats(0.0, 0.5), st.integers(0, 2**32 - 1))
def test_spmm_matches_dense(n, cols, density, seed):
    rng = np.random.default_rng(seed)
    s = sp.random(n, n, density=density, random_state=rng, format="csr")
    x = rng.normal(size=(n, cols))
    expected = s.toarray() @ x
    got = spmm(s, x)
    scale = max(1.0, np.abs(expected).max())
    assert np.max(np.abs(got - expected)) <= 1e-10 * scale


def test_spmm_rejects_nan():
    with pytest.raises(NumericalError):
        spmm(sp.identity(2, format="csr"), np.array([[np.nan], [1.0]]))


def test_relu():
    out, mask = relu(np.array([[-1.0, 0.0, 2.0]]))
    assert out.tolist() == [[0.0, 0.0, 2.0]]
    assert mask.tolist() == [[0.0, 0.0, 1.0]]
    out, mask = relu(-np.ones((2, 2)))
    assert not out.any() and not mask.any()


def test_relu_gradient_of_sum_is_mask(rng):
    x = rng.normal(size=(4, 3))
    _, mask = relu(x)
    fd = central_diff(lambda: relu(x)[0].sum(), x)
    assert np.allclose(fd, mask)


def test_dropout_identity_cases(rng):
    x = rng.normal(size=(10, 4))
    for training in (True, False):
        out, mask = dropout(x, 0.0, training, rng)
        assert out is x and mask is None
    out, mask = dropout(x, 0.6, False, None)
    assert out is x and mask is None


def test_dropout_statistics():
    rng = np.random.default_rng(0)
    x = np.ones((100_000, 1))
    out, mask = dropout(x, 0.6, True, rng)
    survivors = (out != 0).mean()
    assert abs(survivors - 0.4) < 0.01
    assert abs(out.mean() - 1.0) < 0.02
    assert np.allclose(out[out != 0], 1 / 0.4)


def test_dropout_needs_rng():
    with pytest.raises(ValueError):
        dropout(np.ones((2, 2)), 0.5, True, None)


def test_masked_mse_examples():
    loss, grad = masked_mse(np.array([[1.0], [2.0]]), np.array([1.0, 2.0]), np.array([True, True]))
    assert loss == 0 and not grad.any()
    loss, _ = masked_mse(np.array([[1.0], [3.0]]), np.array([1.0, 2.0]), np.array([True, True]))
    assert loss == 0.5


def test_masked_mse_ignores_unlabeled():
    z = np.array([[1.0], [100.0]])
    loss, grad = masked_mse(z, np.array([0.0, np.nan]), np.array([True, False]))
    assert loss == 1.0 and grad[1, 0] == 0.0 and grad[0, 0] == 2.0


def test_masked_mse_empty_mask():
    with pytest.raises(ValueError):
        masked_mse(np.zeros((2, 1)), np.zeros(2), np.zeros(2, dtype=bool))


def test_masked_mse_gradient_finite_difference(rng):
    z = rng.normal(size=(9, 1))
    y = rng.normal(size=9)
    mask = rng.random(9) < 0.5
    mask[0] = True
    _, grad = masked_mse(z, y, mask)
    fd = central_diff(lambda: masked_mse(z, y, mask)[0], z)
    assert np.max(np.abs(fd - grad)) <= 1e-6 * max(1.0, np.abs(grad).max())


def test_adam_zero_gradient_fixed_point():
    theta = {"w": np.array([1.5, -2.0])}
    state = AdamState(lr=0.1, weight_decay=0.0)
    out = adam_step(theta, {"w": np.zeros(2)}, state)
    assert np.array_equal(out["w"], theta["w"])


def test_adam_first_step_moves_by_lr():
    # hand trace: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    state = AdamState(lr=0.005, weight_decay=0.0)
    out = adam_step({"w": np.array([0.3])}, {"w": np.array([1.0])}, state)
    assert abs((0.3 - out["w"][0]) - 0.005 / (1 + 1e-8)) < 1e-15
    assert state.step == 1


def test_adam_constant_gradient_keeps_lr_steps():
    state = AdamState(lr=0.01, weight_decay=0.0)
    p = {"w": np.array([0.0])}
    for _ in range(5):
        prev = p["w"][0]
        p = adam_step(p, {"w": np.array([2.0])}, state)
        assert abs((prev - p["w"][0]) - 0.01) < 1e-9


def test_adam_weight_decay_enters_gradient():
    # with g = 0 the effective gradient is wd * theta > 0, so theta shrinks by ~lr
    state = AdamState(lr=0.01, weight_decay=0.5, decay=frozenset({"w"}))
    out = adam_step({"w": np.array([2.0]), "b": np.array([2.0])}, {"w": np.zeros(1), "b": np.zeros(1)}, state)
    assert abs(out["w"][0] - (2.0 - 0.01)) < 1e-9
    assert out["b"][0] == 2.0


def test_adam_nonfinite_gradient_names_parameter():
    with pytest.raises(NumericalError, match="W1"):
        adam_step({"W1": np.zeros(2)}, {"W1": np.array([np.inf, 0.0])}, AdamState())


def test_adam_deterministic(rng):
    def run():
        r = np.random.default_rng(5)
        p, state = {"w": np.ones((3, 2))}, AdamState()
        for _ in range(20):
            p = adam_step(p, {"w": r.normal(size=(3, 2))}, state)
        return p["w"]

    assert run().tobytes() == run().tobytes()
