"""Teacher vote collection and hybrid noisy aggregation.

Classifier-origin pairs carry raw sensitive features, so their labels come
from a plain argmax over teacher votes (their privacy is handled by DPSGD).
Generator-origin pairs go through the confident Gaussian noisy argmax: a
noisy threshold gate with std ``sigma1``, then a noisy argmax with std
``sigma2``.
"""

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)


class SampleOrigin(enum.Enum):
    FROM_CLASSIFIER = "classifier"
    FROM_GENERATOR = "generator"


class Decision(enum.IntEnum):
    ABSTAIN = -1
    FAKE = 0
    REAL = 1


@dataclass(frozen=True)
class VoteHistogram:
    count_real: int
    count_fake: int

    def __post_init__(self):
        if self.count_real < 0 or self.count_fake < 0:
            raise ValueError("vote counts must be non-negative")

    @property
    def total(self):
        return self.count_real + self.count_fake

    def as_row(self):
        # column order used by the batched kernels: [fake, real]
        return np.array([[self.count_fake, self.count_real]], dtype=np.int64)


@dataclass(frozen=True)
class HyGnmaxConfig:
    threshold: float
    sigma1: float
    sigma2: float
    teacher_count: int

    def __post_init__(self):
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError("sigma1 and sigma2 must be > 0")
        if self.teacher_count < 1:
            raise ValueError("teacher_count must be >= 1")
        if self.threshold > self.teacher_count + 4 * self.sigma1:
            log.warning(
                "threshold %.3g is far above teacher_count %d; nearly every query will abstain",
                self.threshold,
                self.teacher_count,
            )


def collect_votes(teachers, pairs) -> np.ndarray:
    """Vote counts for a batch of (data ‖ one-hot label) pairs.

    Returns an (n, 2) integer array with columns [fake, real]; a teacher votes
    real iff its score exceeds 0.5.
    """
    from .nn import forward  # local import keeps aggregation usable without the engine

    pairs = np.atleast_2d(np.asarray(pairs, dtype=np.float64))
    if len(teachers) == 0:
        raise ValueError("teacher ensemble is empty")
    d_in = teachers[0].layer_dims[0]
    if pairs.shape[1] != d_in:
        raise ValueError(f"pair width {pairs.shape[1]} does not match teacher input dim {d_in}")
    scores = np.stack([forward(t, pairs)[:, 0] for t in teachers])
    return _kernels.count_votes(np.ascontiguousarray(scores))


def collect_histogram(teachers, pair) -> VoteHistogram:
    fake, real = collect_votes(teachers, pair)[0]
    return VoteHistogram(count_real=int(real), count_fake=int(fake))


def argmax_decisions(counts: np.ndarray) -> np.ndarray:
    """Noiseless argmax; equal counts resolve to fake."""
    counts = np.asarray(counts)
    return np.where(counts[:, 1] > counts[:, 0], 1, 0).astype(np.int8)


def gnmax_decisions(counts: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    noisy = counts + rng.normal(0.0, sigma, size=counts.shape)
    return np.where(noisy[:, 1] > noisy[:, 0], 1, 0).astype(np.int8)


def confident_gnmax_decisions(counts: np.ndarray, cfg: HyGnmaxConfig, rng: np.random.Generator) -> np.ndarray:
    """Batched confident GNMax. Codes: 1 real, 0 fake, -1 abstain.

    All gate noise is drawn first, then all argmax noise, so the two stages
    are independent and a batch of one matches the scalar call.
    """
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    noise1 = rng.normal(0.0, cfg.sigma1, size=counts.shape)
    noise2 = rng.normal(0.0, cfg.sigma2, size=counts.shape)
    return _kernels.confident_decisions(counts, noise1, noise2, float(cfg.threshold))


def hygnmax_decisions(counts, origin: SampleOrigin, cfg: HyGnmaxConfig, rng) -> np.ndarray:
    if origin is SampleOrigin.FROM_CLASSIFIER:
        return argmax_decisions(counts)
    return confident_gnmax_decisions(counts, cfg, rng)


def gnmax(hist: VoteHistogram, sigma: float, rng) -> Decision:
    return Decision(int(gnmax_decisions(hist.as_row(), sigma, rng)[0]))


def confident_gnmax(hist: VoteHistogram, cfg: HyGnmaxConfig, rng) -> Decision:
    return Decision(int(confident_gnmax_decisions(hist.as_row(), cfg, rng)[0]))


def hygnmax(hist: VoteHistogram, origin: SampleOrigin, cfg: HyGnmaxConfig, rng) -> Decision:
    return Decision(int(hygnmax_decisions(hist.as_row(), origin, cfg, rng)[0]))


def simulate(count_real, count_fake, cfg: HyGnmaxConfig, draws: int, seed: int):
    """Monte Carlo pass rate and P(real) for a fixed generator-origin histogram.

    ``p_real`` is the fraction of all draws labelled real (abstentions count
    as not real).
    """
    rng = np.random.default_rng(seed)
    counts = np.repeat(np.array([[count_fake, count_real]], dtype=np.int64), draws, axis=0)
    dec = confident_gnmax_decisions(counts, cfg, rng)
    return float(np.mean(dec >= 0)), float(np.mean(dec == 1))


def default_threshold(teacher_count: int) -> float:
    return 0.7 * teacher_count


def real_probability(count_real, count_fake, sigma) -> float:
    """Closed form P(real) of one GNMax query: Phi((real - fake) / (sigma * sqrt 2))."""
    return 0.5 * math.erfc(-(count_real - count_fake) / (sigma * math.sqrt(2.0)) / math.sqrt(2.0))
