"""Decision policies for GP bandits with a set of candidate priors.

Every policy works on a finite feasible set at each step: an ``(m, d)``
location array plus the current timestep. Ties in any argmax/argmin are
broken by prior registration order first, then by feasible-point index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .gp_core import GPPrior, ParameterError, PosteriorModel

logger = logging.getLogger(__name__)

PI2 = math.pi**2


class PolicyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Confidence parameters
# ---------------------------------------------------------------------------


def _check_delta(delta: float):
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")


def beta_finite(t: int, domain_size: int, T: int, delta: float) -> float:
    """Confidence radius for a finite domain: sqrt(2 log(T |X| pi^2 t^2 / (3 delta)))."""
    _check_delta(delta)
    if t < 1 or domain_size < 1 or T < 1:
        raise ParameterError("t, domain_size and T must all be >= 1")
    return math.sqrt(2.0 * math.log(T * domain_size * PI2 * t * t / (3.0 * delta)))


def beta_continuous(t: int, T: int, delta: float, d: int, r: float, a: float, b: float) -> float:
    """Confidence radius for a continuous box ``[0, r]^d``.

    ``delta`` here is the share of the failure probability given to the
    confidence-interval event (half of the overall delta in the default
    split). ``a`` and ``b`` bound the tails of sample-path derivatives.
    """
    _check_delta(delta)
    if t < 1 or T < 1 or d < 1 or not (r > 0 and a > 0 and b > 0):
        raise ParameterError("t, T, d, r, a, b must all be positive")
    inner = math.log(2.0 * d * a / delta)
    if inner <= 0:
        raise ParameterError("log(2 d a / delta) must be positive")
    tau = d * t * t * r * b * math.sqrt(inner)
    return math.sqrt(2.0 * math.log(PI2 * t * t / (3.0 * delta)) + 2.0 * d * math.log(T * tau))


def discretisation_size(t: int, delta: float, d: int, r: float, a: float, b: float) -> float:
    """Per-dimension resolution tau_t of the analysis grid paired with :func:`beta_continuous`."""
    return d * t * t * r * b * math.sqrt(math.log(2.0 * d * a / delta))


def xi(t: int, noise_std: float, num_priors: int, delta: float) -> float:
    """Noise-concentration width: 2 R^2 log(|U| pi^2 t^2 / (3 delta))."""
    _check_delta(delta)
    if t < 1 or num_priors < 1 or not noise_std > 0:
        raise ParameterError("t and num_priors must be >= 1 and noise_std > 0")
    return 2.0 * noise_std**2 * math.log(num_priors * PI2 * t * t / (3.0 * delta))


@dataclass(frozen=True)
class ConfidenceSchedule:
    """All confidence constants for one run.

    ``domain_size=None`` selects the continuous-domain radius, which needs
    ``dimension``, ``box_size`` and per-prior ``smoothness`` constants.
    """

    delta: float
    horizon: int
    noise_std: float
    num_priors: int
    domain_size: Optional[int] = None
    dimension: int = 1
    box_size: float = 1.0

    def __post_init__(self):
        _check_delta(self.delta)
        if self.horizon < 1:
            raise ParameterError("horizon must be >= 1")
        if self.domain_size is not None and self.domain_size < 1:
            raise ParameterError("finite domain needs at least one point")

    @property
    def delta_a(self) -> float:
        return self.delta / 2.0

    @property
    def delta_b(self) -> float:
        return self.delta / 2.0

    def beta(self, t: int, prior: GPPrior) -> float:
        if self.domain_size is not None:
            return beta_finite(t, self.domain_size, self.horizon, self.delta)
        if prior.smoothness is None:
            raise ParameterError(f"prior {prior.id} needs smoothness constants on a continuous domain")
        a, b = prior.smoothness
        return beta_continuous(t, self.horizon, self.delta_a, self.dimension, self.box_size, a, b)

    def xi(self, t: int) -> float:
        return xi(t, self.noise_std, self.num_priors, self.delta)


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass
class PriorLedger:
    prior_id: str
    steps: List[int] = field(default_factory=list)
    etas: List[float] = field(default_factory=list)
    beta_sigmas: List[float] = field(default_factory=list)
    eta_sum: float = 0.0
    beta_sigma_sum: float = 0.0
    y_sum: float = 0.0
    eliminated: bool = False
    # |sum eta| - threshold at the most recent check; positive means violated.
    last_margin: float = -math.inf

    @property
    def count(self) -> int:
        return len(self.steps)


@dataclass
class PolicyState:
    """Surviving prior set plus one ledger per registered prior."""

    prior_ids: List[str]
    surviving: List[str]
    ledgers: Dict[str, PriorLedger]

    @classmethod
    def initial(cls, priors: Sequence[GPPrior]) -> "PolicyState":
        ids = [p.id for p in priors]
        if len(set(ids)) != len(ids):
            raise ValueError("prior ids must be unique")
        return cls(list(ids), list(ids), {i: PriorLedger(i) for i in ids})

    def order(self, prior_id: str) -> int:
        return self.prior_ids.index(prior_id)


@dataclass(frozen=True)
class Selection:
    """A chosen feasible index, the prior credited with it and its UCB terms."""

    index: int
    prior_id: Optional[str]
    ucb: float = float("nan")
    mean: float = float("nan")
    sigma: float = float("nan")
    beta: float = float("nan")


@dataclass(frozen=True)
class UpdateResult:
    eta: float
    threshold: float
    eliminated: Optional[str] = None
    recovered: bool = False


# ---------------------------------------------------------------------------
# UCB helpers
# ---------------------------------------------------------------------------


def ucb_terms(model: PosteriorModel, X, t: int) -> Tuple[np.ndarray, np.ndarray]:
    """Return (mean, sigma) of ``model`` at feasible locations for timestep ``t``."""
    mean, var = model.predict(X, t)
    return mean, np.sqrt(var)


def _priors_by_id(priors) -> Dict[str, GPPrior]:
    return {p.id: p for p in priors}


def ucb_table(prior_ids, priors, posteriors, X, t, schedule):
    """UCB, mean, sigma (each ``(len(prior_ids), m)``) and betas for the listed priors."""
    lookup = _priors_by_id(priors)
    means, sigmas, betas = [], [], []
    for pid in prior_ids:
        beta = schedule.beta(t, lookup[pid])
        mean, sigma = ucb_terms(posteriors[pid], X, t)
        means.append(mean)
        sigmas.append(sigma)
        betas.append(beta)
    means = np.vstack(means)
    sigmas = np.vstack(sigmas)
    betas = np.asarray(betas)
    return means + betas[:, None] * sigmas, means, sigmas, betas


def _select_under(pid, priors, posteriors, X, t, schedule) -> Selection:
    ucb, mean, sigma, beta = ucb_table([pid], priors, posteriors, X, t, schedule)
    j = int(np.argmax(ucb[0]))
    return Selection(j, pid, float(ucb[0, j]), float(mean[0, j]), float(sigma[0, j]), float(beta[0]))


# ---------------------------------------------------------------------------
# PE-GP-UCB
# ---------------------------------------------------------------------------


def pe_gp_ucb_select(state: PolicyState, priors, posteriors, X, t: int, schedule) -> Selection:
    """Jointly maximise ``mu^p(x, t) + beta_t^p sigma^p(x, t)`` over feasible x and surviving p."""
    if not state.surviving:
        raise PolicyError("no surviving priors")
    if len(X) == 0:
        raise PolicyError("empty feasible set")
    ucb, mean, sigma, beta = ucb_table(state.surviving, priors, posteriors, X, t, schedule)
    # np.argmax returns the first maximum in row-major order: (prior, arm) lexicographic.
    k = int(np.argmax(ucb))
    i, j = divmod(k, ucb.shape[1])
    return Selection(j, state.surviving[i], float(ucb[i, j]), float(mean[i, j]), float(sigma[i, j]), float(beta[i]))


def elimination_threshold(ledger: PriorLedger, xi_t: float) -> float:
    return math.sqrt(xi_t * ledger.count) + ledger.beta_sigma_sum


def pe_gp_ucb_update(state: PolicyState, selection: Selection, y: float, t: int, schedule) -> UpdateResult:
    """Record the prediction error of the credited prior and test it for elimination."""
    pid = selection.prior_id
    if pid not in state.surviving:
        raise PolicyError(f"prior {pid} is not in the surviving set")
    ledger = state.ledgers[pid]
    eta = float(y) - selection.mean
    ledger.steps.append(t)
    ledger.etas.append(eta)
    ledger.beta_sigmas.append(selection.beta * selection.sigma)
    ledger.eta_sum += eta
    ledger.beta_sigma_sum += selection.beta * selection.sigma
    ledger.y_sum += float(y)
    threshold = elimination_threshold(ledger, schedule.xi(t))
    ledger.last_margin = abs(ledger.eta_sum) - threshold
    if ledger.last_margin <= 0:
        return UpdateResult(eta, threshold)

    ledger.eliminated = True
    state.surviving = [p for p in state.surviving if p != pid]
    if state.surviving:
        return UpdateResult(eta, threshold, eliminated=pid)

    # Fail-soft: put back the prior that violated its threshold by the least.
    back = min(state.prior_ids, key=lambda p: (state.ledgers[p].last_margin, state.order(p)))
    state.ledgers[back].eliminated = False
    state.surviving = [back]
    logger.warning("surviving prior set emptied at t=%d; re-inserted prior %s", t, back)
    return UpdateResult(eta, threshold, eliminated=pid, recovered=True)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def mle_select(evidence: Mapping[str, float], priors, posteriors, X, t: int, schedule, rng=None) -> Selection:
    """Pick the prior with the highest log evidence, then maximise its UCB.

    ``evidence=None`` (no data yet) draws the prior uniformly with ``rng``.
    """
    ids = [p.id for p in priors]
    if evidence is None:
        if rng is None:
            raise PolicyError("an rng is required to choose a prior before any data")
        pid = ids[int(rng.integers(len(ids)))]
    else:
        values = np.array([evidence[i] for i in ids])
        pid = ids[int(np.argmax(values))]
    return _select_under(pid, priors, posteriors, X, t, schedule)


def posterior_weights(evidence: Optional[Mapping[str, float]], prior_ids, hyperprior=None) -> np.ndarray:
    """P(p | D) proportional to P(D | p) P(p), normalised in log space.

    ``hyperprior`` holds relative weights; priors it does not list get 1.
    """
    n = len(prior_ids)
    if hyperprior is None:
        log_prior = np.full(n, -math.log(n))
    else:
        w = np.array([hyperprior.get(i, 1.0) for i in prior_ids], dtype=float)
        if np.any(w < 0) or not w.sum() > 0:
            raise ParameterError("hyperprior weights must be non-negative with a positive sum")
        with np.errstate(divide="ignore"):
            log_prior = np.log(w / w.sum())
    if evidence is None:
        logits = log_prior
    else:
        logits = np.array([evidence[i] for i in prior_ids]) + log_prior
    return np.exp(logits - logsumexp(logits))


def fully_bayesian_select(evidence, priors, posteriors, X, t: int, schedule, hyperprior=None) -> Selection:
    """Maximise the posterior-weighted average of per-prior UCBs.

    The returned ``prior_id`` is the prior with the largest weight (for
    selection histograms); the UCB terms are those of the mixture.
    """
    ids = [p.id for p in priors]
    weights = posterior_weights(evidence, ids, hyperprior)
    ucb, mean, sigma, beta = ucb_table(ids, priors, posteriors, X, t, schedule)
    mixed = weights @ ucb
    j = int(np.argmax(mixed))
    top = ids[int(np.argmax(weights))]
    return Selection(
        j, top, float(mixed[j]), float(weights @ mean[:, j]), float(weights @ sigma[:, j]), float(weights @ beta)
    )


def regret_balancing_choose_prior(state: PolicyState, bounds: Callable[[str, int], float]) -> str:
    scores = [bounds(p, state.ledgers[p].count + 1) for p in state.surviving]
    return state.surviving[int(np.argmin(scores))]


def regret_balancing_eliminate(state: PolicyState, xi_t: float) -> List[str]:
    """Drop priors whose optimistic average falls below the best pessimistic average.

    Does nothing until every surviving prior has been used at least once.
    """
    if any(state.ledgers[p].count == 0 for p in state.surviving):
        return []
    lower = {}
    for p in state.surviving:
        led = state.ledgers[p]
        lower[p] = led.y_sum / led.count - math.sqrt(xi_t / led.count)
    best = max(lower.values())
    keep, dropped = [], []
    for p in state.surviving:
        led = state.ledgers[p]
        if lower[p] + led.beta_sigma_sum / led.count >= best:
            keep.append(p)
        else:
            dropped.append(p)
            led.eliminated = True
    state.surviving = keep
    return dropped


def regret_balancing_step(state: PolicyState, priors, posteriors, X, t: int, schedule, bounds=None) -> Selection:
    """Choose the prior with the smallest suspected regret and act greedily on its UCB.

    ``bounds(prior_id, n)`` defaults to ``n``. Call
    :func:`regret_balancing_observe` with the outcome.
    """
    bounds = bounds or (lambda pid, n: float(n))
    pid = regret_balancing_choose_prior(state, bounds)
    return _select_under(pid, priors, posteriors, X, t, schedule)


def regret_balancing_observe(state: PolicyState, selection: Selection, y: float, t: int, schedule) -> List[str]:
    led = state.ledgers[selection.prior_id]
    led.steps.append(t)
    led.y_sum += float(y)
    led.beta_sigmas.append(selection.beta * selection.sigma)
    led.beta_sigma_sum += selection.beta * selection.sigma
    return regret_balancing_eliminate(state, schedule.xi(t))


def random_search_select(m: int, rng) -> int:
    if m < 1:
        raise PolicyError("empty feasible set")
    return int(rng.integers(m))


# ---------------------------------------------------------------------------
# Policy objects driven by the harness
# ---------------------------------------------------------------------------


class Policy:
    """Common driver interface.

    ``priors_needed()`` lists the priors whose posteriors ``select`` reads;
    ``needs_evidence`` asks the driver for log marginal likelihoods as well.
    """

    name = "policy"
    needs_evidence = False

    def __init__(self, priors: Sequence[GPPrior], schedule: ConfidenceSchedule, rng=None):
        self.priors = list(priors)
        self.schedule = schedule
        self.rng = rng
        self.state = PolicyState.initial(self.priors)

    def priors_needed(self) -> List[GPPrior]:
        lookup = _priors_by_id(self.priors)
        return [lookup[p] for p in self.state.surviving]

    def select(self, X, t, posteriors, evidence=None) -> Selection:
        raise NotImplementedError

    def observe(self, selection: Selection, y: float, t: int) -> UpdateResult:
        return UpdateResult(float("nan"), float("nan"))


class PEGPUCB(Policy):
    name = "pe-gp-ucb"

    def select(self, X, t, posteriors, evidence=None):
        return pe_gp_ucb_select(self.state, self.priors, posteriors, X, t, self.schedule)

    def observe(self, selection, y, t):
        return pe_gp_ucb_update(self.state, selection, y, t, self.schedule)


class MLEUCB(Policy):
    name = "mle"
    needs_evidence = True

    def priors_needed(self):
        return self.priors

    def select(self, X, t, posteriors, evidence=None):
        return mle_select(evidence, self.priors, posteriors, X, t, self.schedule, self.rng)

    def observe(self, selection, y, t):
        self.state.ledgers[selection.prior_id].steps.append(t)
        return UpdateResult(y - selection.mean, float("nan"))


class FullyBayesianUCB(Policy):
    name = "fully-bayesian"
    needs_evidence = True

    def __init__(self, priors, schedule, rng=None, hyperprior=None):
        super().__init__(priors, schedule, rng)
        self.hyperprior = hyperprior

    def priors_needed(self):
        return self.priors

    def select(self, X, t, posteriors, evidence=None):
        return fully_bayesian_select(evidence, self.priors, posteriors, X, t, self.schedule, self.hyperprior)

    def observe(self, selection, y, t):
        self.state.ledgers[selection.prior_id].steps.append(t)
        return UpdateResult(y - selection.mean, float("nan"))


class RegretBalancing(Policy):
    name = "regret-balancing"

    def __init__(self, priors, schedule, rng=None, bounds=None):
        super().__init__(priors, schedule, rng)
        self.bounds = bounds

    def select(self, X, t, posteriors, evidence=None):
        return regret_balancing_step(self.state, self.priors, posteriors, X, t, self.schedule, self.bounds)

    def priors_needed(self):
        # Only the prior about to be used needs a posterior.
        lookup = _priors_by_id(self.priors)
        return [lookup[regret_balancing_choose_prior(self.state, self.bounds or (lambda pid, n: float(n)))]]

    def observe(self, selection, y, t):
        dropped = regret_balancing_observe(self.state, selection, y, t, self.schedule)
        return UpdateResult(y - selection.mean, float("nan"), ",".join(dropped) or None)


class KnownPriorUCB(Policy):
    """GP-UCB that is told the true prior; a reference, not a competitor."""

    name = "oracle-ucb"

    def __init__(self, priors, schedule, rng=None, true_prior: Optional[str] = None):
        super().__init__(priors, schedule, rng)
        self.true_prior = true_prior if true_prior is not None else self.priors[0].id

    def priors_needed(self):
        return [_priors_by_id(self.priors)[self.true_prior]]

    def select(self, X, t, posteriors, evidence=None):
        return _select_under(self.true_prior, self.priors, posteriors, X, t, self.schedule)

    def observe(self, selection, y, t):
        self.state.ledgers[selection.prior_id].steps.append(t)
        return UpdateResult(y - selection.mean, float("nan"))


class RandomSearch(Policy):
    name = "random"

    def priors_needed(self):
        return []

    def select(self, X, t, posteriors, evidence=None):
        return Selection(random_search_select(len(X), self.rng), None)


POLICIES = {
    cls.name: cls for cls in (PEGPUCB, MLEUCB, FullyBayesianUCB, RegretBalancing, RandomSearch, KnownPriorUCB)
}


def noise_concentration_violated(noise: np.ndarray, assignment: Sequence[int], num_priors: int, noise_std: float, delta_b: float) -> bool:
    """True if some running per-prior noise sum ever exceeds sqrt(xi_t |S_t^p|).

    ``xi_t`` uses ``delta_b`` as the failure probability of this event alone.
    """
    sums = np.zeros(num_priors)
    counts = np.zeros(num_priors, dtype=int)
    for t, (eps, p) in enumerate(zip(noise, assignment), start=1):
        sums[p] += eps
        counts[p] += 1
        width = xi(t, noise_std, num_priors, 2.0 * delta_b)
        if abs(sums[p]) > math.sqrt(width * counts[p]):
            return True
    return False
