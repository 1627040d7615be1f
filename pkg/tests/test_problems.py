import numpy as np
import pytest

from liecsgd.numerics import RngStream
from liecsgd.problems import (
    LogisticProblem,
    Problem,
    QuadraticProblem,
    fd_gradient,
    full_grad,
    make_logistic,
    make_quadratic,
    stoch_grad,
)


def _points(d, n, seed, scale=1.0):
    return scale * np.random.default_rng(seed).standard_normal((n, d))


def test_identity_quadratic():
    p = QuadraticProblem((np.eye(3),), (np.zeros(3),))
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(full_grad(p, x), x)
    assert p.L == 1.0
    np.testing.assert_array_equal(stoch_grad(p, 0, x, 0, RngStream(0)).g, x)


def test_condition_one_single_step():
    p = make_quadratic(20, 3, condition=1.0, seed=4)
    assert p.L == pytest.approx(1.0, abs=1e-12)
    x = np.full(20, 5.0)
    x1 = x - full_grad(p, x)
    np.testing.assert_allclose(x1, p.x_star, atol=1e-12)


def test_eigenvalues_within_condition():
    p = make_quadratic(30, 4, condition=10.0, seed=1)
    for A in p.A:
        w = np.linalg.eigvalsh(A)
        assert w[0] >= 1.0 - 1e-12 and w[-1] <= 10.0 + 1e-12
    assert p.L <= 10.0 + 1e-12


def test_closed_form_minimum_matches_gradient_descent():
    p = make_quadratic(10, 3, condition=4.0, seed=7)
    x = np.zeros(10)
    eta = 1.0 / p.L
    for _ in range(2000):
        x = x - eta * full_grad(p, x)
    assert abs(p.loss(x) - p.f_star) <= 1e-8
    np.testing.assert_allclose(full_grad(p, p.x_star), 0.0, atol=1e-10)


def test_global_gradient_is_worker_mean():
    p = make_quadratic(8, 5, condition=3.0, seed=2)
    x = _points(8, 1, 0)[0]
    np.testing.assert_allclose(full_grad(p, x), np.mean([p.worker_grad(i, x) for i in range(5)], axis=0), atol=1e-12)
    assert p.loss(x) == pytest.approx(np.mean([p.worker_loss(i, x) for i in range(5)]), rel=1e-12)


def test_quadratic_noise_statistics():
    d, sigma = 10, 2.0
    p = make_quadratic(d, 2, condition=3.0, sigma=sigma, seed=3)
    x = np.ones(d)
    exact = p.worker_grad(1, x)
    draws = np.array([stoch_grad(p, 1, x, t, RngStream(11)).g for t in range(100_000)])
    assert np.all(np.abs(draws.mean(axis=0) - exact) <= 3 * sigma / np.sqrt(100_000))
    var = np.mean(np.sum((draws[:10_000] - exact) ** 2, axis=1))
    assert abs(var - sigma**2) <= 0.05 * sigma**2


def test_noise_free_draw_is_exact():
    p = make_quadratic(6, 2, condition=2.0, sigma=0.0, seed=0)
    x = np.arange(6.0)
    np.testing.assert_array_equal(stoch_grad(p, 1, x, 5, RngStream(1)).g, p.worker_grad(1, x))


def test_stoch_grad_determinism_and_range():
    p = make_quadratic(6, 3, sigma=1.0, seed=0)
    x = np.zeros(6)
    a = stoch_grad(p, 2, x, 9, RngStream(5)).g
    b = stoch_grad(p, 2, x, 9, RngStream(5)).g
    c = stoch_grad(p, 2, x, 10, RngStream(5)).g
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    with pytest.raises(IndexError):
        stoch_grad(p, 3, x, 0, RngStream(5))
    q = make_logistic(4, 3, 10, seed=0)
    s1 = stoch_grad(q, 1, np.zeros(4), 3, RngStream(2))
    s2 = stoch_grad(q, 1, np.zeros(4), 3, RngStream(2))
    assert s1.meta == s2.meta and np.array_equal(s1.g, s2.g)


@pytest.mark.parametrize("kwargs", [dict(d=0, N=1), dict(d=3, N=0), dict(d=3, N=1, condition=0.5), dict(d=3, N=1, sigma=-1)])
def test_quadratic_invalid(kwargs):
    with pytest.raises(ValueError):
        make_quadratic(**kwargs)


@pytest.mark.parametrize("args", [(0, 2, 5), (3, 0, 5), (3, 2, 0)])
def test_logistic_invalid(args):
    with pytest.raises(ValueError):
        make_logistic(*args)


@pytest.mark.parametrize("homogeneous", [True, False])
def test_logistic_shards_cover_dataset(homogeneous):
    p = make_logistic(5, 4, 25, seed=3, homogeneous=homogeneous)
    allrows = np.concatenate(p.shards)
    assert allrows.size == 100
    np.testing.assert_array_equal(np.sort(allrows), np.arange(100))


def test_logistic_zero_weight_gradient():
    p = make_logistic(6, 3, 20, seed=1, l2=0.01)
    x = np.zeros(6)
    for i in range(3):
        rows = p.shards[i]
        expected = np.mean(-0.5 * p.labels[rows][:, None] * p.features[rows], axis=0)
        np.testing.assert_allclose(p.worker_grad(i, x), expected, atol=1e-15)


def test_logistic_full_batch_is_sample_mean():
    p = make_logistic(6, 2, 30, seed=2)
    x = _points(6, 1, 3)[0]
    for i in range(2):
        np.testing.assert_allclose(p.worker_grad(i, x), p.sample_grads(i, x).mean(axis=0), atol=1e-14)


def test_logistic_enumerated_draws_average_to_shard_gradient():
    p = make_logistic(5, 2, 12, seed=4)
    x = _points(5, 1, 1)[0]
    for i in range(2):
        rows = p.shards[i]
        # find iterations that hit every position of the shard, one draw each
        seen = {}
        t = 0
        while len(seen) < rows.size:
            s = stoch_grad(p, i, x, t, RngStream(8))
            seen.setdefault(s.meta["sample"], s.g)
            t += 1
        avg = np.mean([seen[r] for r in rows], axis=0)
        np.testing.assert_allclose(avg, p.worker_grad(i, x), rtol=0, atol=1e-15)


def test_logistic_noise_within_sigma():
    p = make_logistic(8, 2, 50, seed=5)
    for x in _points(8, 10, 2):
        exact = p.worker_grad(0, x)
        var = np.mean(np.sum((p.sample_grads(0, x) - exact) ** 2, axis=1))
        assert var <= p.sigma**2


@pytest.mark.parametrize("problem", [make_quadratic(12, 3, condition=8.0, sigma=1.0, seed=1), make_logistic(12, 3, 20, seed=1)])
def test_lipschitz(problem):
    pts = _points(problem.dim, 200, 9, scale=3.0)
    for x, y in zip(pts[:100], pts[100:]):
        for i in range(problem.workers):
            lhs = np.linalg.norm(problem.worker_grad(i, x) - problem.worker_grad(i, y))
            assert lhs <= problem.L * np.linalg.norm(x - y) * (1 + 1e-12)


class _Linear(Problem):
    kind, dim, workers, sigma, L, homogeneous = "linear", 3, 1, 0.0, 0.0, True
    b = np.array([1.0, -2.0, 0.5])

    def worker_loss(self, i, x):
        return float(self.b @ x)


def test_fd_linear_function():
    np.testing.assert_allclose(fd_gradient(_Linear(), np.array([0.3, 0.1, -4.0])), _Linear.b, rtol=1e-9)


def test_fd_matches_full_grad():
    q = make_quadratic(15, 3, condition=10.0, seed=2)
    lg = make_logistic(15, 3, 30, seed=2)
    for x in _points(15, 5, 4):
        g = full_grad(q, x)
        assert np.linalg.norm(fd_gradient(q, x) - g) <= 1e-6 * np.linalg.norm(g)
        g = full_grad(lg, x)
        assert np.linalg.norm(fd_gradient(lg, x) - g) <= 1e-4 * np.linalg.norm(g)
    with pytest.raises(ValueError):
        fd_gradient(q, np.zeros(15), h=0.0)


def test_rejects_bad_instances():
    with pytest.raises(ValueError):
        QuadraticProblem((np.array([[1.0, 2.0], [0.0, 1.0]]),), (np.zeros(2),))
    with pytest.raises(ValueError):
        LogisticProblem(np.zeros((2, 2)), np.array([1.0, 0.0]), (np.array([0, 1]),))


def test_describe_reports_regime():
    assert make_quadratic(3, 2, homogeneous=True).describe()["homogeneous"] is True
    assert make_logistic(3, 2, 5).describe()["homogeneous"] is False
