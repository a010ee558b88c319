"""Problem generators: the hilly toy problem and the Intel Berkeley lab temperature task."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .gp_core import (
    CovarianceTableKernel,
    GPPrior,
    NumericalError,
    TimeVaryingRBF,
    cholesky_with_jitter,
    temporal_decay,
    zero_mean,
)

logger = logging.getLogger(__name__)


class ContractViolation(ValueError):
    """An action outside the feasible set was submitted."""


class IngestionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Finite environments
# ---------------------------------------------------------------------------


@dataclass
class Environment:
    """A finite-armed, possibly time-varying objective.

    ``arms`` is the ``(n, d)`` array of every location; ``values(t)`` gives the
    hidden objective on all arms at timestep ``t`` and ``feasible(t)`` the
    indices available then. ``observations(t)``, when given, replaces
    ``f + noise`` as what the learner sees.
    """

    arms: np.ndarray
    horizon: int
    noise_std: float
    values: Callable[[int], np.ndarray]
    feasible: Callable[[int], np.ndarray]
    observations: Optional[Callable[[int], np.ndarray]] = None

    def feasible_set(self, t: int) -> Tuple[np.ndarray, np.ndarray]:
        """Feasible arm indices and their locations at timestep ``t``."""
        idx = np.asarray(self.feasible(t), dtype=int)
        if idx.size == 0:
            raise ContractViolation(f"feasible set at t={t} is empty")
        return idx, self.arms[idx]

    def best_value(self, t: int) -> float:
        return float(np.max(self.values(t)[self.feasible(t)]))


def env_step(env: Environment, arm: int, t: int, rng=None) -> Tuple[float, float]:
    """Play ``arm`` at ``t``; return the observation and the instantaneous regret."""
    feasible = np.asarray(env.feasible(t), dtype=int)
    if arm not in feasible:
        raise ContractViolation(f"arm {arm} is not feasible at t={t}")
    f = env.values(t)
    regret = float(np.max(f[feasible]) - f[arm])
    if env.observations is not None:
        return float(env.observations(t)[arm]), regret
    y = float(f[arm])
    if env.noise_std > 0:
        if rng is None:
            raise ValueError("a noise rng is required when noise_std > 0")
        y += float(rng.normal(0.0, env.noise_std))
    return y, regret


# ---------------------------------------------------------------------------
# Toy problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HillMeanSpec:
    num_hills: int = 10
    hill_width: float = 0.03
    short_height: float = 0.5
    tall_height: float = 1.5
    lengthscale: float = 0.05
    grid_size: int = 100
    noise_std: float = 0.1
    horizon: int = 200
    true_prior: int = 2

    @property
    def centers(self) -> np.ndarray:
        n = np.arange(1, self.num_hills + 1)
        return (n - 0.5) / self.num_hills

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.grid_size)[:, None]


def hill_mean(X, tall_index: Optional[int], spec: HillMeanSpec) -> np.ndarray:
    """Upper envelope of Gaussian bumps; hill ``tall_index`` (1-based) is tall, the rest short.

    Taking the max rather than the sum keeps every peak at exactly its
    nominal height; summing would lift interior hills above the edge ones.
    """
    x = np.asarray(X, dtype=float).reshape(len(X), -1)[:, 0]
    heights = np.full(spec.num_hills, spec.short_height)
    if tall_index:
        heights[tall_index - 1] = spec.tall_height
    bumps = np.exp(-((x[:, None] - spec.centers[None, :]) ** 2) / (2.0 * spec.hill_width**2))
    return np.max(bumps * heights, axis=1)


def build_toy_priors(spec: HillMeanSpec = HillMeanSpec()) -> List[GPPrior]:
    """Eleven priors sharing one stationary RBF kernel.

    Prior ``n`` has the ``n``-th hill tall; prior 0 has all hills short.
    The kernel object is shared so posteriors can reuse one factorisation.
    """
    kernel = TimeVaryingRBF(spec.lengthscale, 0.0)
    priors = []
    for n in range(spec.num_hills + 1):
        tall = n if n > 0 else None
        priors.append(GPPrior(str(n), (lambda X, t, tall=tall: hill_mean(X, tall, spec)), kernel))
    return priors


def sample_toy_function(true_prior: GPPrior, grid, rng) -> np.ndarray:
    """Draw one GP sample on ``grid`` (time-invariant: evaluated at t=1)."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    t = np.ones(len(grid), dtype=int)
    K = true_prior.kernel(grid, t, grid, t)
    L, _ = cholesky_with_jitter(0.5 * (K + K.T), true_prior.id)
    return true_prior.mean_at(grid, t) + L @ rng.standard_normal(len(grid))


def toy_feasible_schedule(t: int, spec: HillMeanSpec = HillMeanSpec()) -> np.ndarray:
    """Odd steps: whole grid. Even steps: grid minus the true tall hill's window."""
    if t < 1:
        raise ValueError("t must be >= 1")
    x = spec.grid()[:, 0]
    idx = np.arange(len(x))
    if t % 2 == 1:
        return idx
    center = spec.centers[spec.true_prior - 1]
    return idx[np.abs(x - center) > spec.hill_width]


def make_toy_environment(spec: HillMeanSpec, rng) -> Tuple[Environment, List[GPPrior]]:
    priors = build_toy_priors(spec)
    grid = spec.grid()
    f = sample_toy_function(priors[spec.true_prior], grid, rng)
    f.setflags(write=False)
    env = Environment(
        arms=grid,
        horizon=spec.horizon,
        noise_std=spec.noise_std,
        values=lambda t: f,
        feasible=lambda t: toy_feasible_schedule(t, spec),
    )
    return env, priors


# ---------------------------------------------------------------------------
# Intel lab data
# ---------------------------------------------------------------------------


@dataclass
class IntelDay:
    """Per-interval mean temperature for one day, ``(intervals, sensors)``."""

    day: date
    sensors: List[int]
    matrix: np.ndarray
    interval_minutes: int = 10
    dropped: List[int] = field(default_factory=list)
    malformed: int = 0

    def select(self, sensors: Sequence[int]) -> np.ndarray:
        col = {s: i for i, s in enumerate(self.sensors)}
        return self.matrix[:, [col[s] for s in sensors]]


def _parse_record(line: str):
    parts = line.split()
    if len(parts) < 5:
        return None
    try:
        stamp = parts[1]
        fmt = "%Y-%m-%d %H:%M:%S.%f" if "." in stamp else "%Y-%m-%d %H:%M:%S"
        when = datetime.strptime(f"{parts[0]} {stamp}", fmt)
        mote = int(parts[3])
        temp = float(parts[4])
    except ValueError:
        return None
    if not math.isfinite(temp):
        return None
    return when, mote, temp


def ingest_intel(
    lines: Iterable[str],
    day,
    interval_minutes: int = 10,
    sensors: Optional[Sequence[int]] = None,
    valid_range: Optional[Tuple[float, float]] = (-10.0, 60.0),
    max_missing: float = 0.5,
) -> IntelDay:
    """Bucket raw readings of ``day`` into ``interval_minutes`` slots.

    Each cell is the mean reading of one sensor in one slot. Empty cells are
    filled with the sensor's previous slot value, or its day mean before its
    first reading. Sensors missing more than ``max_missing`` of the slots are
    dropped. Lines that do not parse, or whose temperature falls outside
    ``valid_range``, are counted as malformed.
    """
    if isinstance(day, str):
        day = date.fromisoformat(day)
    if 1440 % interval_minutes:
        raise ValueError("interval_minutes must divide a day")
    n_slots = 1440 // interval_minutes
    sums: dict = {}
    counts: dict = {}
    malformed = 0
    for line in lines:
        if not line.strip():
            continue
        rec = _parse_record(line)
        if rec is None:
            malformed += 1
            continue
        when, mote, temp = rec
        if valid_range is not None and not valid_range[0] <= temp <= valid_range[1]:
            malformed += 1
            continue
        if when.date() != day:
            continue
        slot = (when.hour * 60 + when.minute) // interval_minutes
        key = (mote, slot)
        sums[key] = sums.get(key, 0.0) + temp
        counts[key] = counts.get(key, 0) + 1
    if not sums:
        raise IngestionError(f"no parseable records for {day.isoformat()}")

    seen = sorted({m for m, _ in sums})
    wanted = list(sensors) if sensors is not None else seen
    raw = np.full((n_slots, len(wanted)), np.nan)
    for j, mote in enumerate(wanted):
        for slot in range(n_slots):
            c = counts.get((mote, slot))
            if c:
                raw[slot, j] = sums[(mote, slot)] / c

    keep, dropped = [], []
    for j, mote in enumerate(wanted):
        missing = np.isnan(raw[:, j]).mean()
        (dropped if missing > max_missing else keep).append(j)
    if dropped:
        logger.warning("dropping sensors with > %.0f%% missing slots: %s", 100 * max_missing, [wanted[j] for j in dropped])

    matrix = raw[:, keep]
    for j in range(matrix.shape[1]):
        col = matrix[:, j]
        fallback = np.nanmean(col)
        last = np.nan
        for i in range(n_slots):
            if np.isnan(col[i]):
                col[i] = last if not np.isnan(last) else fallback
            else:
                last = col[i]
    return IntelDay(day, [wanted[j] for j in keep], matrix, interval_minutes, [wanted[j] for j in dropped], malformed)


def load_intel_days(path, days: Sequence, interval_minutes: int = 10, sensors=None) -> List[IntelDay]:
    """Ingest several days from one raw file (read once)."""
    with open(path) as fh:
        lines = fh.readlines()
    return [ingest_intel(lines, d, interval_minutes, sensors) for d in days]


def write_day_csv(day: IntelDay, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval"] + [f"sensor_{s}" for s in day.sensors])
        for i, row in enumerate(day.matrix):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_day_csv(path, day=None, interval_minutes: int = 10) -> IntelDay:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    sensors = [int(h.split("_", 1)[1]) for h in rows[0][1:]]
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, len(sensors))
    if isinstance(day, str):
        day = date.fromisoformat(day)
    return IntelDay(day, sensors, matrix, interval_minutes)


def standardise(matrix: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """Shift and scale by one scalar mean/std so the best sensor stays the best."""
    m = float(matrix.mean())
    s = float(matrix.std())
    if s <= 0:
        s = 1.0
    return (matrix - m) / s, m, s


def one_step_noise(z: np.ndarray, floor: float = 0.05) -> float:
    """Residual std of the last-value predictor along time, floored."""
    if z.shape[0] < 2:
        return floor
    return max(float(np.std(np.diff(z, axis=0))), floor)


def correlation_table(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Empirical correlation between columns; returns (table, mask of usable columns)."""
    std = z.std(axis=0)
    ok = std > 1e-12
    c = np.corrcoef(z[:, ok], rowvar=False)
    c = np.atleast_2d(c)
    np.fill_diagonal(c, 1.0)
    return 0.5 * (c + c.T), ok


def separable_log_likelihood(z: np.ndarray, cov: np.ndarray, forgetting: float, noise_std: float) -> float:
    """Zero-mean GP log-evidence of a full ``(intervals, sensors)`` grid.

    The kernel is ``cov[i, j] * (1 - eps)^(|t - t'| / 2)`` so the Gram matrix
    is a Kronecker product; both factors are eigendecomposed.
    """
    n_t, n_s = z.shape
    steps = np.arange(1, n_t + 1)
    A = temporal_decay(steps, steps, forgetting)
    a, Qa = np.linalg.eigh(A)
    c, Qc = np.linalg.eigh(cov)
    a = np.clip(a, 0.0, None)
    c = np.clip(c, 0.0, None)
    lam = np.outer(a, c) + noise_std**2
    rot = Qa.T @ z @ Qc
    return float(-0.5 * np.sum(rot**2 / lam) - 0.5 * np.sum(np.log(lam)) - 0.5 * z.size * math.log(2 * math.pi))


EPS_GRID = tuple(round(0.01 * i, 2) for i in range(51))


def fit_forgetting(z: np.ndarray, cov: np.ndarray, noise_std: float, grid=EPS_GRID) -> float:
    """Grid value of the forgetting factor with the highest log-evidence (first on ties)."""
    scores = [separable_log_likelihood(z, cov, eps, noise_std) for eps in grid]
    return float(grid[int(np.argmax(scores))])


@dataclass(frozen=True)
class SensorDayModel:
    day: Optional[date]
    sensors: Tuple[int, ...]
    cov: np.ndarray
    forgetting: float
    noise_std: float


def fit_sensor_day(day: IntelDay, sensors: Sequence[int], grid=EPS_GRID) -> SensorDayModel:
    z, _, _ = standardise(day.select(sensors))
    cov, ok = correlation_table(z)
    if not ok.all():
        raise ValueError(f"constant sensors on {day.day}: {[s for s, k in zip(sensors, ok) if not k]}")
    try:
        cholesky_with_jitter(cov)
    except NumericalError as exc:
        raise NumericalError(f"covariance of {day.day} is not PSD", str(day.day)) from exc
    noise = one_step_noise(z)
    eps = fit_forgetting(z, cov, noise, grid)
    return SensorDayModel(day.day, tuple(sensors), cov, eps, noise)


def common_sensors(days: Sequence[IntelDay], target: Optional[IntelDay] = None) -> List[int]:
    """Sensors present in every day and non-constant on each of them."""
    pool = list(days) + ([target] if target is not None else [])
    shared = set(pool[0].sensors)
    for d in pool[1:]:
        shared &= set(d.sensors)
    sensors = sorted(shared)
    constant = set()
    for d in pool:
        z = d.select(sensors)
        for s, sd in zip(sensors, z.std(axis=0)):
            if sd <= 1e-12:
                constant.add(s)
    if constant:
        logger.warning("dropping sensors with constant readings: %s", sorted(constant))
    return [s for s in sensors if s not in constant]


def build_intel_priors(history: Sequence[IntelDay], sensors: Sequence[int], grid=EPS_GRID) -> Tuple[List[GPPrior], List[SensorDayModel]]:
    """One zero-mean prior per history day over arms ``0..len(sensors)-1``."""
    priors, models = [], []
    for day in history:
        model = fit_sensor_day(day, sensors, grid)
        label = day.day.isoformat() if day.day else str(len(priors))
        priors.append(GPPrior(label, zero_mean, CovarianceTableKernel(model.cov, model.forgetting)))
        models.append(model)
    return priors, models


def make_intel_environment(target: IntelDay, sensors: Sequence[int], noise_std: float, horizon: Optional[int] = None) -> Environment:
    """Sensors are arms; the learner sees standardised temperatures, regret is in degrees."""
    raw = target.select(sensors)
    z, _, _ = standardise(raw)
    T = horizon or raw.shape[0]
    arms = np.arange(len(sensors), dtype=float)[:, None]
    every = np.arange(len(sensors))
    return Environment(
        arms=arms,
        horizon=T,
        noise_std=noise_std,
        values=lambda t: raw[t - 1],
        feasible=lambda t: every,
        observations=lambda t: z[t - 1],
    )
