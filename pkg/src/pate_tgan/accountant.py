"""Gaussian-DP accounting for the hybrid DPSGD + noisy-aggregation student.

All budgets are ``mu`` values under Gaussian differential privacy. The two
sources of privacy loss per student step are the subsampled Gaussian
mechanism from DPSGD (approximated through the central limit theorem) and
``n_g`` Gaussian noisy-argmax queries to the teacher ensemble.

Note on naming: ``delta`` is always the DP failure probability and
``noise_multiplier`` is always the DPSGD noise-to-clip ratio.
"""

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Tuple

from scipy.optimize import bisect

# exp(x) overflows a double for x > ~709.78
_MAX_EXP_ARG = math.log(1.7976931348623157e308)
MIN_NOISE_MULTIPLIER = 1.0 / math.sqrt(_MAX_EXP_ARG)

EPSILON_SEARCH_MAX = 200.0
EPSILON_TOL = 1e-9


@dataclass(frozen=True)
class GdpBudget:
    mu: float

    def __post_init__(self):
        if not math.isfinite(self.mu) or self.mu < 0:
            raise ValueError(f"mu must be finite and >= 0, got {self.mu}")

    def __float__(self):
        return float(self.mu)


@dataclass(frozen=True)
class EpsDelta:
    epsilon: float
    delta: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True)
class SubsampledGaussianSpec:
    sampling_rate: float
    noise_multiplier: float
    steps: int

    def __post_init__(self):
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ValueError(f"sampling_rate must lie in (0, 1], got {self.sampling_rate}")
        if self.noise_multiplier <= 0:
            raise ValueError(f"noise_multiplier must be > 0, got {self.noise_multiplier}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass(frozen=True)
class GnmaxSpec:
    sigma2: float
    queries_per_step: int
    steps: int

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be > 0, got {self.sigma2}")
        if self.queries_per_step < 1 or self.steps < 1:
            raise ValueError("queries_per_step and steps must be >= 1")


def _as_mu(b) -> float:
    mu = b.mu if isinstance(b, GdpBudget) else float(b)
    if not math.isfinite(mu) or mu < 0:
        raise ValueError(f"invalid GDP parameter {mu!r}: must be finite and >= 0")
    return mu


def compose(budgets: Iterable) -> GdpBudget:
    """Compose Gaussian-DP mechanisms: ``mu = sqrt(sum mu_i^2)``.

    Accepts ``GdpBudget`` instances or plain floats. An empty sequence is
    perfect privacy.
    """
    mus = [_as_mu(b) for b in budgets]
    return GdpBudget(math.sqrt(math.fsum(m * m for m in mus)))


def normal_cdf(x: float) -> float:
    """Standard normal CDF via ``erfc``; absolute error below 1e-12."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def mu_to_delta(budget, epsilon: float) -> float:
    """The delta(epsilon) curve of a mu-GDP mechanism, clamped to [0, 1]."""
    mu = _as_mu(budget)
    if epsilon < 0 or math.isnan(epsilon):
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if mu == 0.0:
        return 0.0
    first = normal_cdf(-epsilon / mu + mu / 2.0)
    tail = normal_cdf(-epsilon / mu - mu / 2.0)
    # e^eps * tail, computed in log space so large eps cannot overflow
    second = math.exp(epsilon + math.log(tail)) if tail > 0.0 else 0.0
    return min(1.0, max(0.0, first - second))


def mu_to_epsilon(budget, delta_target: float) -> float:
    """Smallest epsilon with ``mu_to_delta(mu, epsilon) <= delta_target``.

    Bracketed bisection on [0, 200] to an absolute tolerance of 1e-9.
    Returns ``inf`` for an infinite mu or when epsilon would exceed 200.
    """
    mu = budget.mu if isinstance(budget, GdpBudget) else float(budget)
    if math.isinf(mu) and mu > 0:
        return math.inf
    mu = _as_mu(mu)
    if not delta_target > 0:
        raise ValueError(f"delta must be > 0, got {delta_target}")
    if mu == 0.0:
        return 0.0
    if delta_target >= mu_to_delta(mu, 0.0):
        return 0.0
    hi = EPSILON_SEARCH_MAX
    if mu_to_delta(mu, hi) > delta_target:
        # beyond the search bracket: report as unbounded
        return math.inf
    return bisect(lambda e: mu_to_delta(mu, e) - delta_target, 0.0, hi, xtol=EPSILON_TOL, maxiter=200)


def epsilon_to_mu(epsilon: float, delta: float) -> float:
    """The largest mu whose delta(epsilon) does not exceed ``delta``.

    Used to turn an (epsilon, delta) target into a training cap.
    """
    if epsilon < 0 or not 0 < delta < 1:
        raise ValueError("need epsilon >= 0 and 0 < delta < 1")
    lo, hi = 1e-12, 1.0
    while mu_to_delta(hi, epsilon) < delta:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError("target is satisfied by every mu")
    return bisect(lambda m: mu_to_delta(m, epsilon) - delta, lo, hi, xtol=1e-13, maxiter=400)


def subsampled_mu(spec: SubsampledGaussianSpec) -> GdpBudget:
    """CLT approximation for T steps of the Poisson-subsampled Gaussian mechanism.

    ``mu_C = p * sqrt(T * (exp(1/z^2) - 1))``. Approximate for small T.
    """
    z = spec.noise_multiplier
    arg = 1.0 / (z * z)
    if arg > _MAX_EXP_ARG:
        raise OverflowError(
            f"noise_multiplier={z} overflows exp(1/z^2); minimum supported is {MIN_NOISE_MULTIPLIER:.6g}"
        )
    return GdpBudget(spec.sampling_rate * math.sqrt(spec.steps * math.expm1(arg)))


def gnmax_mu(spec: GnmaxSpec) -> GdpBudget:
    """``sqrt(2 * n_g * T) / sigma2``: each binary GNMax query is sqrt(2)/sigma2-GDP."""
    return GdpBudget(math.sqrt(2.0 * spec.queries_per_step * spec.steps) / spec.sigma2)


def total_mu(n_c: int, n_d: int, noise_multiplier: float, n_g: int, sigma2: float, steps: int) -> GdpBudget:
    """Total budget of ``steps`` student steps: DPSGD part composed with GNMax part."""
    if n_c < 1 or n_d < 1:
        raise ValueError("n_c and n_d must be positive")
    if n_c > n_d:
        raise ValueError(f"n_c={n_c} exceeds dataset size n_d={n_d}")
    mu_c = subsampled_mu(SubsampledGaussianSpec(n_c / n_d, noise_multiplier, steps))
    mu_g = gnmax_mu(GnmaxSpec(sigma2, n_g, steps))
    return compose([mu_c, mu_g])


def breakdown(n_c, n_d, noise_multiplier, n_g, sigma2, steps) -> Tuple[float, float]:
    mu_c = subsampled_mu(SubsampledGaussianSpec(n_c / n_d, noise_multiplier, steps)).mu
    mu_g = gnmax_mu(GnmaxSpec(sigma2, n_g, steps)).mu
    return mu_c, mu_g


@dataclass(frozen=True)
class PrivacyParams:
    """Per-step accounting inputs; mirrors the arguments of ``total_mu``."""

    n_c: int
    n_d: int
    noise_multiplier: float
    n_g: int
    sigma2: float


@dataclass
class BudgetLedger:
    """Running Gaussian-DP spend of a training run.

    ``dpsgd_steps`` and ``pate_steps`` normally move together; they differ
    only during warmup, where generator-side queries are neither made nor
    charged.
    """

    mu_cap: float
    mu_spent: float = 0.0
    steps_taken: int = 0
    dpsgd_steps: int = 0
    pate_steps: int = 0
    history: List[Tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.mu_cap > 0:
            raise ValueError(f"mu_cap must be > 0, got {self.mu_cap}")

    @property
    def exhausted(self) -> bool:
        return self.mu_spent >= self.mu_cap

    def charge(self, params: PrivacyParams, pate: bool = True) -> "BudgetLedger":
        self.steps_taken += 1
        self.dpsgd_steps += 1
        if pate:
            self.pate_steps += 1
        if params.noise_multiplier < MIN_NOISE_MULTIPLIER:
            # no usable DPSGD noise: the step is not private at all
            spent = math.inf
        elif self.dpsgd_steps == self.pate_steps:
            spent = total_mu(params.n_c, params.n_d, params.noise_multiplier, params.n_g, params.sigma2, self.dpsgd_steps).mu
        else:
            parts = [subsampled_mu(SubsampledGaussianSpec(params.n_c / params.n_d, params.noise_multiplier, self.dpsgd_steps))]
            if self.pate_steps:
                parts.append(gnmax_mu(GnmaxSpec(params.sigma2, params.n_g, self.pate_steps)))
            spent = compose(parts).mu
        self.mu_spent = spent
        self.history.append((self.steps_taken, spent))
        return self


def ledger_charge(ledger: BudgetLedger, params: PrivacyParams, pate: bool = True) -> BudgetLedger:
    return ledger.charge(params, pate=pate)


def ledger_exhausted(ledger: BudgetLedger) -> bool:
    return ledger.exhausted
