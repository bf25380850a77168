import numpy as np
import pytest

from genesig import numcore as nc


def test_matmul_identity():
    m = np.arange(9, dtype=float).reshape(3, 3)
    out = nc.matmul(nc.Tensor(np.eye(3)), nc.Tensor(m))
    np.testing.assert_array_equal(out.data, m)


def test_matmul_hand_case():
    a = nc.Tensor([[1, 2], [3, 4]])
    b = nc.Tensor([[5], [6]])
    np.testing.assert_array_equal(nc.matmul(a, b).data, [[17], [39]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    got = nc.matmul(nc.Tensor(a), nc.Tensor(b)).data
    assert np.abs(got - expected).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="inner dimensions"):
        nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2, 3))))


def test_relu_values():
    out = nc.relu(nc.Tensor([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 2.0]])


def test_add_identity_and_mul_oracle():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(
        nc.add(nc.Tensor(m), nc.Tensor(np.zeros_like(m))).data, m)
    got = nc.mul(nc.Tensor(m), nc.Tensor(m)).data
    expected = np.empty_like(m)
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            expected[i, j] = m[i, j] * m[i, j]
    assert np.abs(got - expected).max() < 1e-15


def test_elementwise_shape_mismatch():
    with pytest.raises(ValueError):
        nc.add(nc.Tensor(np.ones((2, 2))), nc.Tensor(np.ones((2, 3))))


def test_backward_linear_map():
    # root = sum(W x) => d/dx = W^T 1
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 4))
    x = nc.Tensor(rng.normal(size=(4, 1)))
    root = nc.sum_all(nc.matmul(nc.Tensor(w, requires=False), x))
    nc.backward(root)
    np.testing.assert_allclose(x.grad, w.T @ np.ones((3, 1)), atol=1e-14)


def test_backward_relu_subgradient():
    x = nc.Tensor([[-1.0, 2.0]])
    root = nc.sum_all(nc.relu(x))
    nc.backward(root)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0]])


def test_backward_requires_scalar_root():
    with pytest.raises(ValueError, match="scalar"):
        nc.backward(nc.Tensor(np.ones((2, 2))))


def _finite_difference(f, arrays, h=1e-5):
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            plus = f()
            arr[idx] = orig - h
            minus = f()
            arr[idx] = orig
            g[idx] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def test_backward_three_layer_network_matches_finite_differences():
    """Random 3-layer ReLU network gradient vs central differences."""
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 6))
    w1 = rng.normal(size=(6, 7)) * 0.7
    w2 = rng.normal(size=(7, 4)) * 0.7
    w3 = rng.normal(size=(4, 2)) * 0.7
    b = rng.normal(size=(1, 2))

    def build():
        xt, w1t, w2t, w3t, bt = (nc.Tensor(a) for a in (x, w1, w2, w3, b))
        h = nc.relu(nc.matmul(xt, w1t))
        h = nc.relu(nc.matmul(h, w2t))
        out = nc.add_row(nc.matmul(h, w3t), bt)
        return nc.sum_all(nc.mul(out, out)), (xt, w1t, w2t, w3t, bt)

    root, handles = build()
    nc.backward(root)
    fd = _finite_difference(lambda: float(build()[0].data[0, 0]),
                            [x, w1, w2, w3, b])
    for tensor, approx in zip(handles, fd):
        denom = np.maximum(np.maximum(np.abs(approx), np.abs(tensor.grad)), 1e-8)
        assert (np.abs(tensor.grad - approx) / denom).max() < 1e-5


def test_backward_batch_norm_and_ce_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 5))
    gamma = rng.uniform(0.5, 1.5, size=(1, 5))
    beta = rng.normal(size=(1, 5))
    labels = np.array([0, 1, 0, 1, 1, 0])
    mask = np.array([True, True, True, False, True, True])
    weights = np.array([1.2, 0.8])

    def build():
        xt, gt, bt = nc.Tensor(x), nc.Tensor(gamma), nc.Tensor(beta)
        h, _, _ = nc.batch_norm_train(xt, gt, bt)
        h = nc.relu(h)
        loss = nc.weighted_cross_entropy(
            nc.matmul(h, nc.Tensor(np.eye(5)[:, :2], requires=False)),
            labels, mask, weights)
        return loss, (xt, gt, bt)

    root, handles = build()
    nc.backward(root)
    fd = _finite_difference(lambda: float(build()[0].data[0, 0]),
                            [x, gamma, beta])
    for tensor, approx in zip(handles, fd):
        denom = np.maximum(np.maximum(np.abs(approx), np.abs(tensor.grad)), 1e-8)
        assert (np.abs(tensor.grad - approx) / denom).max() < 1e-5


def test_repeated_backward_fresh_tapes_are_independent():
    x_arr = np.array([[1.0, 2.0]])
    grads = []
    for _ in range(2):
        x = nc.Tensor(x_arr)
        nc.backward(nc.sum_all(nc.mul(x, x)))
        grads.append(x.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_weighted_cross_entropy_empty_mask():
    with pytest.raises(ValueError, match="empty mask"):
        nc.weighted_cross_entropy(nc.Tensor(np.zeros((2, 2))),
                                  np.array([0, 1]),
                                  np.array([False, False]),
                                  np.array([1.0, 1.0]))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_gamma_poisson_moments():
    """Monte-Carlo moments of the mixture: mean mu, variance mu + mu^2/phi."""
    rng = nc.make_rng(123)
    draws = nc.sample_gamma_poisson(np.full(100_000, 50.0), 1.0, rng)
    assert 49 <= draws.mean() <= 51
    assert 2420 <= draws.var() <= 2680  # target 2550


def test_gamma_poisson_near_poisson_limit():
    rng = nc.make_rng(5)
    draws = nc.sample_gamma_poisson(np.full(100_000, 5.0), 1e9, rng)
    assert abs(draws.var() - 5.0) / 5.0 < 0.05


def test_gamma_poisson_support_and_domain():
    rng = nc.make_rng(6)
    draws = nc.sample_gamma_poisson(np.full(1000, 0.3), 0.5, rng)
    assert (draws >= 0).all()
    with pytest.raises(ValueError):
        nc.sample_gamma_poisson(np.array([-1.0]), 1.0, rng)
    with pytest.raises(ValueError):
        nc.sample_gamma_poisson(np.array([1.0]), 0.0, rng)


def test_distribution_helpers():
    rng = nc.make_rng(7)
    u = nc.sample_uniform(0.2, 2.2, rng, size=10_000)
    assert u.min() >= 0.2 and u.max() <= 2.2
    e = nc.sample_exponential(25.0, rng, size=100_000)
    assert abs(e.mean() - 25.0) / 25.0 < 0.02
    ln = nc.sample_lognormal(rng, size=100_000)
    assert abs(np.median(ln) - 1.0) < 0.05
    with pytest.raises(ValueError):
        nc.sample_uniform(2.0, 1.0, rng)
    with pytest.raises(ValueError):
        nc.sample_exponential(-1.0, rng)


def test_seeded_streams_are_bitwise_identical():
    a = nc.sample_gamma_poisson(np.full(1000, 20.0), 2.0, nc.make_rng(99))
    b = nc.sample_gamma_poisson(np.full(1000, 20.0), 2.0, nc.make_rng(99))
    np.testing.assert_array_equal(a, b)
