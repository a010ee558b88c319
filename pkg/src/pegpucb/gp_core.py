"""Spatio-temporal Gaussian-process machinery.

Inputs are pairs ``(x, t)``: a location ``x`` in ``R^d`` (a single arm index
for finite, table-backed domains) and a positive integer timestep ``t``.
Batched routines take an ``(n, d)`` location array together with an ``(n,)``
array of timesteps.

A prior is a mean function plus a kernel. Kernels are callables
``kernel(X1, t1, X2, t2) -> (n1, n2) array``; an optional ``diag(X, t)``
method is used when present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_triangular

JITTER_START = 1e-10
JITTER_MAX = 1e-4
# Tolerance on k(z, z) <= 1 before a kernel is considered unnormalised.
KERNEL_SCALE_TOL = 1e-9


class ParameterError(ValueError):
    """Invalid numeric parameter passed to a kernel or confidence function."""


class NumericalError(ArithmeticError):
    """Gram matrix could not be factorised even after jitter escalation."""

    def __init__(self, message: str, prior_id: Optional[str] = None):
        super().__init__(message if prior_id is None else f"[prior {prior_id}] {message}")
        self.prior_id = prior_id


class KernelScaleError(ValueError):
    """Kernel violates the k(z, z) <= 1 normalisation."""


@dataclass(frozen=True)
class SpaceTimePoint:
    x: Tuple[float, ...]
    t: int

    def __post_init__(self):
        if int(self.t) != self.t or self.t < 1:
            raise ParameterError(f"timestep must be a positive integer, got {self.t}")
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))
        object.__setattr__(self, "t", int(self.t))


def as_arrays(points: Sequence[SpaceTimePoint]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack points into an ``(n, d)`` location array and an ``(n,)`` time array."""
    if len(points) == 0:
        return np.zeros((0, 1)), np.zeros(0, dtype=int)
    X = np.array([p.x for p in points], dtype=float)
    t = np.array([p.t for p in points], dtype=int)
    return X, t


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _check_forgetting(forgetting: float):
    if not 0.0 <= forgetting <= 1.0:
        raise ParameterError(f"forgetting factor must lie in [0, 1], got {forgetting}")


def temporal_decay(t1, t2, forgetting: float) -> np.ndarray:
    """(1 - eps)^(|t - t'| / 2) on the outer grid of two timestep arrays."""
    dt = np.abs(np.subtract.outer(np.asarray(t1, dtype=float), np.asarray(t2, dtype=float)))
    return (1.0 - forgetting) ** (dt / 2.0)


def tv_rbf_kernel(x, t: int, x2, t2: int, lengthscale: float, forgetting: float) -> float:
    """Time-varying RBF kernel between two single points.

    ``exp(-||x - x'||^2 / (2 l)) * (1 - eps)^(|t - t'| / 2)``. Note that ``l``
    divides the squared distance directly (it is not squared).
    """
    if lengthscale <= 0:
        raise ParameterError(f"lengthscale must be positive, got {lengthscale}")
    _check_forgetting(forgetting)
    diff = np.atleast_1d(np.asarray(x, dtype=float)) - np.atleast_1d(np.asarray(x2, dtype=float))
    sq = float(diff @ diff)
    return math.exp(-sq / (2.0 * lengthscale)) * (1.0 - forgetting) ** (abs(t - t2) / 2.0)


@dataclass(frozen=True)
class TimeVaryingRBF:
    """Batched version of :func:`tv_rbf_kernel`. ``forgetting=0`` is a plain RBF."""

    lengthscale: float
    forgetting: float = 0.0

    def __post_init__(self):
        if self.lengthscale <= 0:
            raise ParameterError(f"lengthscale must be positive, got {self.lengthscale}")
        _check_forgetting(self.forgetting)

    def __call__(self, X1, t1, X2, t2) -> np.ndarray:
        X1, X2 = _as_2d(X1), _as_2d(X2)
        sq = (
            np.sum(X1**2, axis=1)[:, None]
            + np.sum(X2**2, axis=1)[None, :]
            - 2.0 * X1 @ X2.T
        )
        np.maximum(sq, 0.0, out=sq)
        K = np.exp(-sq / (2.0 * self.lengthscale))
        if self.forgetting > 0.0:
            K *= temporal_decay(t1, t2, self.forgetting)
        return K

    def diag(self, X, t) -> np.ndarray:
        return np.ones(len(_as_2d(X)))


@dataclass(frozen=True, eq=False)
class CovarianceTableKernel:
    """Kernel over arm indices backed by an explicit covariance table.

    ``k((i, t), (j, t')) = table[i, j] * (1 - eps)^(|t - t'| / 2)``; the first
    location coordinate holds the integer arm index.
    """

    table: np.ndarray
    forgetting: float = 0.0

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        if table.ndim != 2 or table.shape[0] != table.shape[1]:
            raise ParameterError("covariance table must be square")
        if not np.allclose(table, table.T, atol=1e-12):
            raise ParameterError("covariance table must be symmetric")
        _check_forgetting(self.forgetting)
        object.__setattr__(self, "table", table)

    @staticmethod
    def _index(X) -> np.ndarray:
        return np.rint(_as_2d(X)[:, 0]).astype(int)

    def __call__(self, X1, t1, X2, t2) -> np.ndarray:
        K = self.table[np.ix_(self._index(X1), self._index(X2))]
        if self.forgetting > 0.0:
            K = K * temporal_decay(t1, t2, self.forgetting)
        return K

    def diag(self, X, t) -> np.ndarray:
        i = self._index(X)
        return self.table[i, i]


def kernel_diag(kernel, X, t) -> np.ndarray:
    if hasattr(kernel, "diag"):
        return np.asarray(kernel.diag(X, t), dtype=float)
    X = _as_2d(X)
    t = np.asarray(t)
    return np.array([kernel(X[i : i + 1], t[i : i + 1], X[i : i + 1], t[i : i + 1])[0, 0] for i in range(len(X))])


def zero_mean(X, t) -> np.ndarray:
    return np.zeros(len(_as_2d(X)))


# ---------------------------------------------------------------------------
# Priors and data
# ---------------------------------------------------------------------------

MeanFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class GPPrior:
    """A named candidate prior: a mean function plus a kernel, with optional smoothness constants.

    ``smoothness`` holds the pair ``(a, b)`` bounding sample-path derivatives,
    only needed for confidence radii on continuous domains.
    """

    id: str
    mean: MeanFn
    kernel: Callable
    smoothness: Optional[Tuple[float, float]] = None

    def mean_at(self, X, t) -> np.ndarray:
        X = _as_2d(X)
        m = np.asarray(self.mean(X, np.asarray(t)), dtype=float).reshape(-1)
        if m.shape[0] != X.shape[0]:
            raise ValueError(f"mean of prior {self.id} returned {m.shape[0]} values for {X.shape[0]} points")
        if not np.all(np.isfinite(m)):
            raise NumericalError("mean function returned non-finite values", self.id)
        return m


def check_kernel_scale(prior: GPPrior, X, t, on_violation: str = "reject") -> GPPrior:
    """Check ``k(z, z) <= 1`` on the given points.

    ``on_violation="reject"`` raises :class:`KernelScaleError`;
    ``"rescale"`` returns a copy of the prior whose kernel is divided by the
    largest diagonal value seen.
    """
    d = kernel_diag(prior.kernel, X, t)
    top = float(np.max(d)) if d.size else 0.0
    if top <= 1.0 + KERNEL_SCALE_TOL:
        return prior
    if on_violation == "reject":
        raise KernelScaleError(f"prior {prior.id}: kernel diagonal reaches {top:.6g} > 1")
    if on_violation != "rescale":
        raise ValueError(f"unknown on_violation mode {on_violation!r}")
    base = prior.kernel

    def scaled(X1, t1, X2, t2):
        return base(X1, t1, X2, t2) / top

    return GPPrior(prior.id, prior.mean, scaled, prior.smoothness)


class ObservationLog:
    """Ordered observations ``((x, t), y)`` with a shared noise level ``R``."""

    def __init__(self, noise_std: float, dim: Optional[int] = None):
        if not noise_std > 0:
            raise ParameterError(f"noise_std must be positive, got {noise_std}")
        self.noise_std = float(noise_std)
        self._X: list = []
        self._t: list = []
        self._y: list = []
        self._dim = dim

    def append(self, x, t: int, y: float):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self._dim is None:
            self._dim = x.shape[0]
        elif x.shape[0] != self._dim:
            raise ValueError(f"location has dimension {x.shape[0]}, log holds {self._dim}")
        if t < 1 or (self._t and t <= self._t[-1]):
            raise ValueError(f"timesteps must be positive and strictly increasing (got {t})")
        self._X.append(x)
        self._t.append(int(t))
        self._y.append(float(y))

    def __len__(self) -> int:
        return len(self._y)

    @property
    def X(self) -> np.ndarray:
        if not self._X:
            return np.zeros((0, self._dim or 1))
        return np.vstack(self._X)

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self._t, dtype=int)

    @property
    def y(self) -> np.ndarray:
        return np.asarray(self._y, dtype=float)

    @property
    def entries(self) -> Iterator[Tuple[SpaceTimePoint, float]]:
        for x, t, y in zip(self._X, self._t, self._y):
            yield SpaceTimePoint(tuple(x), t), y

    def prefix(self, n: int) -> "ObservationLog":
        out = ObservationLog(self.noise_std, self._dim)
        out._X, out._t, out._y = self._X[:n], self._t[:n], self._y[:n]
        return out

    @classmethod
    def from_arrays(cls, X, t, y, noise_std: float) -> "ObservationLog":
        X = _as_2d(X)
        log = cls(noise_std, X.shape[1])
        for xi, ti, yi in zip(X, np.asarray(t), np.asarray(y)):
            log.append(xi, int(ti), float(yi))
        return log


# ---------------------------------------------------------------------------
# Exact inference
# ---------------------------------------------------------------------------


def cholesky_with_jitter(A: np.ndarray, prior_id: Optional[str] = None) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A + jitter I``, escalating jitter x10 up to 1e-4."""
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    if not np.all(np.isfinite(A)):
        raise NumericalError("Gram matrix contains non-finite entries", prior_id)
    jitter = JITTER_START
    eye = np.eye(n)
    while jitter <= JITTER_MAX * (1 + 1e-12):
        try:
            L = np.linalg.cholesky(A + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
            continue
        if np.all(np.isfinite(L)):
            return L, jitter
        jitter *= 10.0
    raise NumericalError(f"Cholesky failed with jitter up to {JITTER_MAX:g}", prior_id)


@dataclass(frozen=True)
class _Factor:
    L: np.ndarray
    jitter: float


def _factorise(prior: GPPrior, X, t, noise_std: float) -> _Factor:
    K = np.asarray(prior.kernel(X, t, X, t), dtype=float)
    K = 0.5 * (K + K.T)
    L, jitter = cholesky_with_jitter(K + noise_std**2 * np.eye(len(K)), prior.id)
    return _Factor(L, jitter)


@dataclass(frozen=True, eq=False)
class PosteriorModel:
    """GP posterior under one prior, conditioned on a fixed dataset.

    Immutable after construction; ``weights`` is ``(K + R^2 I)^{-1}(y - mu)``.
    """

    prior: GPPrior
    X: np.ndarray
    times: np.ndarray
    y: np.ndarray
    noise_std: float
    L: np.ndarray
    weights: np.ndarray
    jitter: float

    @property
    def n(self) -> int:
        return len(self.y)

    def predict(self, X, t) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at locations ``X`` for prediction time(s) ``t``.

        ``t`` may be a scalar (all queries at the same time) or an array.
        """
        X = _as_2d(X)
        tq = np.broadcast_to(np.asarray(t), (X.shape[0],))
        prior_mean = self.prior.mean_at(X, tq)
        prior_var = kernel_diag(self.prior.kernel, X, tq)
        if self.n == 0:
            return prior_mean, np.clip(prior_var, 0.0, None)
        Ks = np.asarray(self.prior.kernel(X, tq, self.X, self.times), dtype=float)
        mean = prior_mean + Ks @ self.weights
        V = solve_triangular(self.L, Ks.T, lower=True, check_finite=False)
        var = prior_var - np.sum(V * V, axis=0)
        return mean, np.clip(var, 0.0, np.maximum(prior_var, 0.0))

    def log_marginal_likelihood(self) -> float:
        if self.n == 0:
            return 0.0
        resid = self.y - self.prior.mean_at(self.X, self.times)
        return float(
            -0.5 * resid @ self.weights
            - np.sum(np.log(np.diag(self.L)))
            - 0.5 * self.n * math.log(2.0 * math.pi)
        )


def _build_model(prior: GPPrior, X, t, y, noise_std, factor: _Factor) -> PosteriorModel:
    if len(y):
        resid = y - prior.mean_at(X, t)
        z = solve_triangular(factor.L, resid, lower=True, check_finite=False)
        weights = solve_triangular(factor.L.T, z, lower=False, check_finite=False)
    else:
        weights = np.zeros(0)
    return PosteriorModel(prior, X, t, y, noise_std, factor.L, weights, factor.jitter)


def fit_posterior(prior: GPPrior, log: ObservationLog) -> PosteriorModel:
    """Condition ``prior`` on every observation in ``log``."""
    X, t, y = log.X, log.times, log.y
    factor = _factorise(prior, X, t, log.noise_std)
    return _build_model(prior, X, t, y, log.noise_std, factor)


def fit_posteriors(priors: Sequence[GPPrior], log: ObservationLog) -> dict:
    """Fit every prior on the same log, reusing one factorisation per kernel object.

    Returns ``{prior.id: PosteriorModel}`` in the order given.
    """
    X, t, y = log.X, log.times, log.y
    cache: dict = {}
    out = {}
    for prior in priors:
        key = id(prior.kernel)
        if key not in cache:
            cache[key] = _factorise(prior, X, t, log.noise_std)
        out[prior.id] = _build_model(prior, X, t, y, log.noise_std, cache[key])
    return out


def predict(model: PosteriorModel, query: SpaceTimePoint) -> Tuple[float, float]:
    mean, var = model.predict(np.array([query.x]), query.t)
    return float(mean[0]), float(var[0])


def log_marginal_likelihood(prior: GPPrior, log: ObservationLog) -> float:
    """``log N(y; mu(X), K + R^2 I)``; zero for an empty log."""
    if len(log) == 0:
        return 0.0
    return fit_posterior(prior, log).log_marginal_likelihood()


def information_gain(prior: GPPrior, points: Sequence[SpaceTimePoint], noise_std: float) -> float:
    """``0.5 * log det(I + R^-2 K)`` for the given points."""
    if len(points) == 0:
        raise ValueError("information gain needs at least one point")
    if not noise_std > 0:
        raise ParameterError(f"noise_std must be positive, got {noise_std}")
    X, t = as_arrays(points)
    K = np.asarray(prior.kernel(X, t, X, t), dtype=float)
    K = 0.5 * (K + K.T)
    L, _ = cholesky_with_jitter(np.eye(len(K)) + K / noise_std**2, prior.id)
    return float(np.sum(np.log(np.diag(L))))
