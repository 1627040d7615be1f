"""Synthetic objectives split across workers.

Two families are provided:

* quadratic: ``f_i(x) = 1/2 (x - c_i)^T A_i (x - c_i)`` with ``A_i`` built as a
  diagonal plus a low-rank PSD term, eigenvalues in ``[1, condition]``. The
  stochastic gradient adds isotropic Gaussian noise with covariance
  ``(sigma^2 / d) I``, so ``E||noise||^2 = sigma^2`` exactly.
* logistic: l2-regularised logistic regression on a synthetic dataset, each
  worker owning a disjoint shard; the stochastic gradient uses one uniformly
  drawn sample of the shard.

The global objective is the worker average ``f(x) = 1/N sum_i f_i(x)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, as_vector, mean_reduce


@dataclass(frozen=True, eq=False)
class GradientSample:
    worker: int
    t: int
    x: np.ndarray
    g: np.ndarray
    meta: dict = field(default_factory=dict)


class Problem:
    kind: str
    dim: int
    workers: int
    sigma: float
    L: float
    M: float | None = None
    homogeneous: bool

    def worker_loss(self, i: int, x) -> float:
        raise NotImplementedError

    def worker_grad(self, i: int, x) -> np.ndarray:
        raise NotImplementedError

    def _stoch_grad(self, i: int, x: np.ndarray, t: int, rng: RngStream) -> GradientSample:
        raise NotImplementedError

    def loss(self, x) -> float:
        x = as_vector(x, self.dim)
        return float(sum(self.worker_loss(i, x) for i in range(self.workers)) / self.workers)

    def grad(self, x) -> np.ndarray:
        x = as_vector(x, self.dim)
        return mean_reduce([self.worker_grad(i, x) for i in range(self.workers)])

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "workers": self.workers,
            "sigma": self.sigma,
            "L": self.L,
            "M": self.M,
            "homogeneous": self.homogeneous,
        }


@dataclass(frozen=True, eq=False)
class QuadraticProblem(Problem):
    A: tuple  # per-worker (d, d) PSD matrices
    c: tuple  # per-worker centres
    sigma: float = 0.0
    homogeneous: bool = False
    kind: str = "quadratic"

    def __post_init__(self):
        if len(self.A) != len(self.c) or not self.A:
            raise ValueError("need one matrix and one centre per worker")
        for a in self.A:
            if a.shape != (self.dim, self.dim) or not np.allclose(a, a.T):
                raise ValueError("each A_i must be a symmetric d x d matrix")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        L = max(float(np.linalg.eigvalsh(a)[-1]) for a in self.A)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "M", None)
        A_mean = sum(self.A) / len(self.A)
        x_star = np.linalg.solve(A_mean, sum(a @ c for a, c in zip(self.A, self.c)) / len(self.A))
        object.__setattr__(self, "_A_mean", A_mean)
        object.__setattr__(self, "_x_star", x_star)
        object.__setattr__(self, "_f_star", Problem.loss(self, x_star))

    @property
    def dim(self) -> int:
        return int(self.c[0].shape[0])

    @property
    def workers(self) -> int:
        return len(self.A)

    @property
    def x_star(self) -> np.ndarray:
        return self._x_star.copy()

    @property
    def f_star(self) -> float:
        return self._f_star

    def loss(self, x):
        # f(x) = f* + 1/2 (x - x*)^T A_mean (x - x*) for any quadratic
        r = as_vector(x, self.dim) - self._x_star
        return self._f_star + 0.5 * float(r @ (self._A_mean @ r))

    def grad(self, x):
        return self._A_mean @ (as_vector(x, self.dim) - self._x_star)

    def worker_loss(self, i, x):
        r = as_vector(x, self.dim) - self.c[i]
        return 0.5 * float(r @ (self.A[i] @ r))

    def worker_grad(self, i, x):
        return self.A[i] @ (as_vector(x, self.dim) - self.c[i])

    def _stoch_grad(self, i, x, t, rng):
        g = self.worker_grad(i, x)
        if self.sigma > 0:
            z = RngStream(rng.seed, i, "noise").generator(t).standard_normal(self.dim)
            g = g + (self.sigma / np.sqrt(self.dim)) * z
        return GradientSample(i, t, x, g, {"noise": self.sigma > 0})


@dataclass(frozen=True, eq=False)
class LogisticProblem(Problem):
    features: np.ndarray  # (n_total, d)
    labels: np.ndarray  # +-1
    shards: tuple  # per-worker index arrays into the dataset
    l2: float = 1e-3
    homogeneous: bool = False
    kind: str = "logistic"

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if not np.all(np.abs(self.labels) == 1):
            raise ValueError("labels must be +-1")
        row_sq = np.einsum("ij,ij->i", self.features, self.features)
        object.__setattr__(self, "L", float(row_sq.max()) / 4 + self.l2)
        # single-sample data term has norm <= ||a_j||, which bounds its variance
        object.__setattr__(self, "sigma", float(np.sqrt(row_sq.max())))
        object.__setattr__(self, "M", None)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def workers(self) -> int:
        return len(self.shards)

    def _margins(self, rows, x):
        return self.labels[rows] * (self.features[rows] @ x)

    def worker_loss(self, i, x):
        x = as_vector(x, self.dim)
        m = self._margins(self.shards[i], x)
        return float(np.mean(np.logaddexp(0.0, -m))) + 0.5 * self.l2 * float(x @ x)

    def sample_grads(self, i, x) -> np.ndarray:
        """Per-sample gradients of shard ``i``, one row per sample."""
        x = as_vector(x, self.dim)
        rows = self.shards[i]
        m = self._margins(rows, x)
        # sigmoid(-m) computed without overflow
        s = np.exp(-np.logaddexp(0.0, m))
        return (-(self.labels[rows] * s))[:, None] * self.features[rows] + self.l2 * x

    def worker_grad(self, i, x):
        x = as_vector(x, self.dim)
        rows = self.shards[i]
        m = self._margins(rows, x)
        s = np.exp(-np.logaddexp(0.0, m))
        return (-(self.labels[rows] * s)) @ self.features[rows] / rows.shape[0] + self.l2 * x

    def _stoch_grad(self, i, x, t, rng):
        rows = self.shards[i]
        j = int(RngStream(rng.seed, i, "data").generator(t).integers(rows.shape[0]))
        row = rows[j : j + 1]
        m = self._margins(row, x)
        s = np.exp(-np.logaddexp(0.0, m))
        g = (-(self.labels[row] * s)) @ self.features[row] + self.l2 * x
        return GradientSample(i, t, x, g, {"sample": int(row[0])})


def _check_sizes(**sizes):
    for name, value in sizes.items():
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value}")


def make_quadratic(
    d: int,
    N: int,
    condition: float = 1.0,
    sigma: float = 0.0,
    seed: int = 0,
    homogeneous: bool = False,
    center_scale: float = 1.0,
    rank: int = 2,
) -> QuadraticProblem:
    _check_sizes(d=d, N=N)
    if condition < 1:
        raise ValueError("condition must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if rank < 0:
        raise ValueError("rank must be non-negative")
    gen = RngStream(seed, 0, "data").generator()
    r = min(rank, d)

    def one():
        diag = gen.uniform(1.0, (1.0 + condition) / 2, size=d)
        A = np.diag(diag)
        if r > 0:
            U = gen.standard_normal((d, r))
            top = np.linalg.norm(U, 2)
            # scale so that U U^T has spectral norm (condition - 1) / 2
            U *= np.sqrt((condition - 1.0) / 2) / top if top > 0 else 0.0
            A = A + U @ U.T
        return (A + A.T) / 2, center_scale * gen.standard_normal(d)

    if homogeneous:
        A, c = one()
        mats, centres = [A] * N, [c] * N
    else:
        pairs = [one() for _ in range(N)]
        mats, centres = [p[0] for p in pairs], [p[1] for p in pairs]
    return QuadraticProblem(tuple(mats), tuple(centres), sigma=float(sigma), homogeneous=homogeneous)


def make_logistic(
    d: int,
    N: int,
    samples_per_worker: int,
    seed: int = 0,
    l2: float = 1e-3,
    homogeneous: bool = False,
) -> LogisticProblem:
    """Planted-model logistic regression.

    With ``homogeneous`` the samples are dealt to workers uniformly at random;
    otherwise they are sorted by label before a contiguous split, so shards
    see skewed label mixes. Shards are disjoint and cover the dataset either way.
    """
    _check_sizes(d=d, N=N, samples_per_worker=samples_per_worker)
    gen = RngStream(seed, 0, "data").generator()
    n = N * samples_per_worker
    features = gen.standard_normal((n, d)) / np.sqrt(d)
    w_true = gen.standard_normal(d) * 2.0
    logits = features @ w_true
    labels = np.where(gen.random(n) < 1.0 / (1.0 + np.exp(-logits)), 1.0, -1.0)
    if homogeneous:
        order = gen.permutation(n)
    else:
        order = np.argsort(labels, kind="stable")
    shards = tuple(np.sort(order[i * samples_per_worker : (i + 1) * samples_per_worker]) for i in range(N))
    return LogisticProblem(features, labels, shards, l2=l2, homogeneous=homogeneous)


def stoch_grad(p: Problem, i: int, x, t: int, rng: RngStream) -> GradientSample:
    """Stochastic gradient of worker ``i`` at iteration ``t``; a pure function of (seed, i, t, x)."""
    if not 0 <= i < p.workers:
        raise IndexError(f"worker {i} out of range for N={p.workers}")
    return p._stoch_grad(i, as_vector(x, p.dim), t, rng)


def full_grad(p: Problem, x) -> np.ndarray:
    """Exact gradient of ``f = 1/N sum_i f_i``."""
    return p.grad(x)


def fd_gradient(p: Problem, x, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of the global objective."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = as_vector(x, p.dim)
    out = np.empty(p.dim)
    for j in range(p.dim):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        out[j] = (p.loss(xp) - p.loss(xm)) / (2 * h)
    return out
