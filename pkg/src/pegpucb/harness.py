"""Seeded experiment runner that drives policies against environments."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .environments import (
    Environment,
    HillMeanSpec,
    build_intel_priors,
    common_sensors,
    env_step,
    load_intel_days,
    make_intel_environment,
    make_toy_environment,
)
from .gp_core import GPPrior, ObservationLog, fit_posteriors
from .policies import POLICIES, ConfidenceSchedule, Policy

logger = logging.getLogger(__name__)

ALGORITHMS = ("pe-gp-ucb", "mle", "fully-bayesian", "regret-balancing", "random")
STREAMS = {"function": 0, "noise": 1, "policy": 2}
OUTPUT_ENV = "PEGPUCB_OUTPUT"


class ConfigError(ValueError):
    pass


class AggregationError(ValueError):
    pass


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "results")


@dataclass
class ExperimentConfig:
    experiment: str = "toy"
    algorithms: List[str] = field(default_factory=lambda: list(ALGORITHMS))
    horizon: Optional[int] = None
    num_seeds: int = 30
    seed: int = 0
    delta: float = 0.1
    noise_std: Optional[float] = None
    problem: Dict = field(default_factory=dict)
    output_dir: Optional[str] = None
    overrides: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_seeds < 1:
            raise ConfigError("num_seeds must be >= 1")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.noise_std is not None and self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if not self.algorithms:
            raise ConfigError("at least one algorithm is required")
        unknown = [a for a in self.algorithms if a not in POLICIES]
        if unknown:
            raise ConfigError(f"unknown algorithms {unknown}; choose from {sorted(POLICIES)}")
        if self.experiment not in PROBLEMS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; registered: {sorted(PROBLEMS)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        extra = set(data) - names
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def digest(self) -> str:
        payload = dict(self.to_dict(), output_dir=None)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def seeds(self) -> List[int]:
        return list(range(self.seed, self.seed + self.num_seeds))


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose of one seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],)))


# ---------------------------------------------------------------------------
# Problems
# ---------------------------------------------------------------------------


@dataclass
class Problem:
    env: Environment
    priors: List[GPPrior]
    gp_noise_std: float
    true_prior: Optional[str] = None


ProblemFactory = Callable[[ExperimentConfig, int], Problem]
PROBLEMS: Dict[str, ProblemFactory] = {}


def register_problem(name: str, factory: ProblemFactory):
    """Register a problem; ``factory(config, seed) -> Problem``."""
    PROBLEMS[name] = factory


def _toy_spec(config: ExperimentConfig) -> HillMeanSpec:
    params = dict(config.problem)
    if config.horizon is not None:
        params["horizon"] = config.horizon
    if config.noise_std is not None:
        params["noise_std"] = config.noise_std
    try:
        return HillMeanSpec(**params)
    except TypeError as exc:
        raise ConfigError(f"bad toy problem parameters: {exc}") from exc


def toy_problem(config: ExperimentConfig, seed: int) -> Problem:
    spec = _toy_spec(config)
    env, priors = make_toy_environment(spec, stream(seed, "function"))
    return Problem(env, priors, spec.noise_std, priors[spec.true_prior].id)


_INTEL_CACHE: Dict[str, tuple] = {}


def intel_setup(config: ExperimentConfig):
    """Ingest the raw file once per configuration; returns (priors, env, gp noise)."""
    p = config.problem
    key = json.dumps([p, config.horizon, config.noise_std], sort_keys=True)
    if key in _INTEL_CACHE:
        return _INTEL_CACHE[key]
    path = p.get("data") or os.environ.get("PEGPUCB_INTEL_DATA")
    if not path:
        raise ConfigError("intel experiment needs problem.data (path to the raw data file)")
    target_day = p.get("target_day", "2004-03-14")
    history_days = p.get("history_days") or [f"2004-03-{d:02d}" for d in range(1, 14)]
    interval = int(p.get("interval_minutes", 10))
    days = load_intel_days(path, list(history_days) + [target_day], interval)
    history, target = days[:-1], days[-1]
    sensors = common_sensors(history, target)
    priors, models = build_intel_priors(history, sensors)
    noise = config.noise_std if config.noise_std is not None else float(np.mean([m.noise_std for m in models]))
    env = make_intel_environment(target, sensors, noise, config.horizon)
    _INTEL_CACHE[key] = (priors, env, noise)
    return _INTEL_CACHE[key]


def intel_problem(config: ExperimentConfig, seed: int) -> Problem:
    priors, env, noise = intel_setup(config)
    return Problem(env, priors, noise)


register_problem("toy", toy_problem)
register_problem("intel", intel_problem)


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

TRACE_COLUMNS = (
    "t", "arm", "x", "prior", "y", "f", "mean", "sigma", "beta", "eta",
    "xi", "threshold", "regret", "cum_regret", "eliminated", "recovered",
)


@dataclass
class StepRecord:
    t: int
    arm: int
    x: Tuple[float, ...]
    prior: Optional[str]
    y: float
    f: float
    mean: float
    sigma: float
    beta: float
    eta: float
    xi: float
    threshold: float
    regret: float
    cum_regret: float
    eliminated: Optional[str] = None
    recovered: bool = False


@dataclass
class RunTrace:
    algorithm: str
    seed: int
    records: List[StepRecord] = field(default_factory=list)
    prior_ids: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def regret(self) -> np.ndarray:
        return np.array([r.regret for r in self.records])

    @property
    def cum_regret(self) -> np.ndarray:
        return np.array([r.cum_regret for r in self.records])

    @property
    def chosen_priors(self) -> List[Optional[str]]:
        return [r.prior for r in self.records]

    def eliminations(self) -> List[Tuple[int, str]]:
        """Steps at which a prior left the surviving set (the critical steps)."""
        out = []
        for r in self.records:
            if r.eliminated:
                out.extend((r.t, p) for p in r.eliminated.split(","))
        return out

    def surviving_at_end(self) -> List[str]:
        gone = {p for _, p in self.eliminations()}
        back = {r.prior for r in self.records if r.recovered}
        return [p for p in self.prior_ids if p not in gone or p in back]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, tuple):
        return " ".join(repr(float(c)) for c in v)
    return str(v)


def trace_filename(algorithm: str, seed: int) -> str:
    return f"trace_{algorithm}_seed{seed}.csv"


def write_trace(trace: RunTrace, directory, config: Optional[ExperimentConfig] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / trace_filename(trace.algorithm, trace.seed)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace.records:
            w.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])
    meta = {
        "algorithm": trace.algorithm,
        "seed": trace.seed,
        "priors": trace.prior_ids,
        "version": __version__,
        "config_hash": config.digest() if config else None,
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
    return path


def _parse(v: str, kind):
    if v == "":
        return None
    return kind(v)


def read_trace(path) -> RunTrace:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    trace = RunTrace(meta["algorithm"], int(meta["seed"]), prior_ids=list(meta["priors"]))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            trace.records.append(
                StepRecord(
                    t=int(row["t"]),
                    arm=int(row["arm"]),
                    x=tuple(float(c) for c in row["x"].split()),
                    prior=row["prior"] or None,
                    **{k: float(row[k]) for k in ("y", "f", "mean", "sigma", "beta", "eta", "xi", "threshold", "regret", "cum_regret")},
                    eliminated=row["eliminated"] or None,
                    recovered=row["recovered"] == "1",
                )
            )
    return trace


def read_traces(directory) -> List[RunTrace]:
    return [read_trace(p) for p in sorted(Path(directory).glob("trace_*.csv"))]


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def _bounds_from(settings) -> Optional[Callable[[str, int], float]]:
    if settings is None:
        return None
    scale = float(settings.get("scale", 1.0))
    exponent = float(settings.get("exponent", 1.0))
    per_prior = settings.get("per_prior", {})

    def bounds(pid: str, n: int) -> float:
        s = per_prior.get(pid, {})
        return float(s.get("scale", scale)) * n ** float(s.get("exponent", exponent))

    return bounds


def make_policy(name: str, problem: Problem, schedule: ConfidenceSchedule, rng, overrides: Optional[dict] = None) -> Policy:
    cls = POLICIES[name]
    opts = dict(overrides or {})
    if name == "regret-balancing":
        return cls(problem.priors, schedule, rng, bounds=_bounds_from(opts.get("bounds")))
    if name == "fully-bayesian":
        return cls(problem.priors, schedule, rng, hyperprior=opts.get("hyperprior"))
    if name == "oracle-ucb":
        return cls(problem.priors, schedule, rng, true_prior=opts.get("true_prior", problem.true_prior))
    return cls(problem.priors, schedule, rng)


def run_cell(config: ExperimentConfig, algorithm: str, seed: int, problem: Optional[Problem] = None) -> RunTrace:
    """Run one (algorithm, seed) pair for the full horizon."""
    if problem is None:
        problem = PROBLEMS[config.experiment](config, seed)
    env = problem.env
    T = env.horizon
    schedule = ConfidenceSchedule(
        delta=config.delta,
        horizon=T,
        noise_std=problem.gp_noise_std,
        num_priors=len(problem.priors),
        domain_size=len(env.arms),
    )
    policy = make_policy(algorithm, problem, schedule, stream(seed, "policy"), config.overrides.get(algorithm))
    noise_rng = stream(seed, "noise")
    log = ObservationLog(problem.gp_noise_std, env.arms.shape[1])
    trace = RunTrace(algorithm, seed, prior_ids=[p.id for p in problem.priors])
    cum = 0.0
    for t in range(1, T + 1):
        idx, X = env.feasible_set(t)
        needed = policy.priors_needed()
        posteriors = fit_posteriors(needed, log) if needed else {}
        evidence = None
        if policy.needs_evidence and len(log):
            evidence = {pid: m.log_marginal_likelihood() for pid, m in posteriors.items()}
        sel = policy.select(X, t, posteriors, evidence)
        arm = int(idx[sel.index])
        y, r = env_step(env, arm, t, noise_rng)
        upd = policy.observe(sel, y, t)
        cum += r
        xi_t = schedule.xi(t)
        trace.records.append(
            StepRecord(
                t=t,
                arm=arm,
                x=tuple(float(c) for c in env.arms[arm]),
                prior=sel.prior_id,
                y=y,
                f=float(env.values(t)[arm]),
                mean=sel.mean,
                sigma=sel.sigma,
                beta=sel.beta,
                eta=upd.eta,
                xi=xi_t,
                threshold=upd.threshold,
                regret=r,
                cum_regret=cum,
                eliminated=upd.eliminated,
                recovered=upd.recovered,
            )
        )
        log.append(env.arms[arm], t, y)
    return trace


@dataclass
class CellFailure:
    algorithm: str
    seed: int
    error: str


@dataclass
class ExperimentResult:
    traces: List[RunTrace]
    failures: List[CellFailure]

    def by_algorithm(self) -> Dict[str, List[RunTrace]]:
        out: Dict[str, List[RunTrace]] = {}
        for tr in self.traces:
            out.setdefault(tr.algorithm, []).append(tr)
        return out


def _cell_job(args):
    config, algorithm, seed, out = args
    try:
        trace = run_cell(config, algorithm, seed)
    except Exception as exc:  # one failed cell must not take down the batch
        logger.error("cell (%s, seed %d) failed: %s", algorithm, seed, exc)
        return None, CellFailure(algorithm, seed, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")
    if out is not None:
        write_trace(trace, out, config)
    return trace, None


def run_experiment(config: ExperimentConfig, write: bool = True, workers: int = 1, progress: Optional[Callable] = None) -> ExperimentResult:
    """Run every (algorithm, seed) cell; failures are recorded, not raised.

    Traces go to ``config.output_dir`` (or ``$PEGPUCB_OUTPUT``) when ``write``.
    """
    out = None
    if write:
        out = Path(config.output_dir or default_output_dir())
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.dumps() + "\n")
    jobs = [(config, a, s, out) for a in config.algorithms for s in config.seeds()]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_cell_job(job))
            if progress:
                progress(job[1], job[2])
    traces = [tr for tr, _ in results if tr is not None]
    failures = [f for _, f in results if f is not None]
    if out is not None and failures:
        with open(out / "failures.json", "w") as fh:
            json.dump([asdict(f) for f in failures], fh, indent=2)
    return ExperimentResult(traces, failures)
