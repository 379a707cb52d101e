"""DPSGD gradient privatization: per-example L2 clipping plus Gaussian noise."""

from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class ClipNoiseConfig:
    clip_bound: float
    noise_multiplier: float
    batch_size: int

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValueError(f"clip_bound must be > 0, got {self.clip_bound}")
        if self.noise_multiplier < 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def noise_std(self):
        return self.noise_multiplier * self.clip_bound


def _as_rows(grads):
    g = np.ascontiguousarray(grads, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"per-example gradients must be 2-D (batch, params), got {g.shape}")
    return g


def clip_per_example(grads, clip_bound) -> np.ndarray:
    """Scale each row by ``min(1, R / ||g||)``; rows already within R are untouched."""
    if not clip_bound > 0:
        raise ValueError(f"clip_bound must be > 0, got {clip_bound}")
    return _kernels.clip_rows(_as_rows(grads), float(clip_bound))


def clipped_sum(grads, clip_bound) -> np.ndarray:
    return _kernels.clipped_sum(_as_rows(grads), float(clip_bound))


def dpsgd_gradient(grads, cfg: ClipNoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """``(sum_i clip(g_i, R) + N(0, (z R)^2 I)) / batch_size``.

    Noise is added to the clipped sum, so one example moves the pre-noise
    value by at most R.
    """
    g = _as_rows(grads)
    if g.shape[0] == 0:
        raise ValueError("no per-example gradients")
    total = _kernels.clipped_sum(g, float(cfg.clip_bound))
    if cfg.noise_multiplier > 0:
        total = total + rng.normal(0.0, cfg.noise_std, size=total.shape)
    return total / cfg.batch_size
