"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``PATE_TGAN_NO_NUMBA=1`` (or have numba missing) to force the numpy path.
Both paths are kept importable so tests and the benchmark can compare them.
"""

import os

import numpy as np

try:
    from numba import njit

    _numba_installed = True
except ImportError:  # pragma: no cover
    _numba_installed = False

# Clipped rows are scaled to R * (1 - CLIP_SLACK) so the L2 bound survives
# floating-point rounding in the norm and in later sums.
CLIP_SLACK = 1e-12

USE_NUMBA = _numba_installed and os.environ.get("PATE_TGAN_NO_NUMBA", "0") not in ("1", "true", "yes")


# ---------------------------------------------------------------- numpy path


def outer_rows_np(a, delta):
    """Per-row outer products ``a[i] ⊗ delta[i]``, flattened row-major."""
    n = a.shape[0]
    return np.einsum("ni,nj->nij", a, delta).reshape(n, -1)


def clip_rows_np(grads, bound):
    norms = np.sqrt(np.einsum("ij,ij->i", grads, grads))
    out = grads.copy()
    over = norms > bound
    out[over] *= (bound * (1.0 - CLIP_SLACK) / norms[over])[:, None]
    return out


def clipped_sum_np(grads, bound):
    return clip_rows_np(grads, bound).sum(axis=0)


def count_votes_np(scores):
    """``scores`` is (k, n) teacher outputs; returns (n, 2) int64 counts [fake, real]."""
    real = (scores > 0.5).sum(axis=0).astype(np.int64)
    k = scores.shape[0]
    return np.stack([k - real, real], axis=1)


def confident_decisions_np(counts, noise1, noise2, threshold):
    """Decision codes: 1 real, 0 fake, -1 abstain. Ties after noise go to fake."""
    c = counts.astype(np.float64)
    gate = (c + noise1).max(axis=1) >= threshold
    noisy = c + noise2
    real = noisy[:, 1] > noisy[:, 0]
    out = np.where(real, 1, 0).astype(np.int8)
    out[~gate] = -1
    return out


# ---------------------------------------------------------------- numba path

if _numba_installed:

    @njit(cache=True)
    def outer_rows_nb(a, delta):
        n, p = a.shape
        q = delta.shape[1]
        out = np.empty((n, p * q))
        for i in range(n):
            for j in range(p):
                aij = a[i, j]
                base = j * q
                for k in range(q):
                    out[i, base + k] = aij * delta[i, k]
        return out

    @njit(cache=True)
    def clip_rows_nb(grads, bound):
        n, p = grads.shape
        out = grads.copy()
        for i in range(n):
            s = 0.0
            for j in range(p):
                s += grads[i, j] * grads[i, j]
            norm = np.sqrt(s)
            if norm > bound:
                scale = bound * (1.0 - CLIP_SLACK) / norm
                for j in range(p):
                    out[i, j] = grads[i, j] * scale
        return out

    @njit(cache=True)
    def clipped_sum_nb(grads, bound):
        n, p = grads.shape
        total = np.zeros(p)
        for i in range(n):
            s = 0.0
            for j in range(p):
                s += grads[i, j] * grads[i, j]
            norm = np.sqrt(s)
            scale = bound * (1.0 - CLIP_SLACK) / norm if norm > bound else 1.0
            for j in range(p):
                total[j] += grads[i, j] * scale
        return total

    @njit(cache=True)
    def count_votes_nb(scores):
        k, n = scores.shape
        out = np.zeros((n, 2), dtype=np.int64)
        for i in range(n):
            r = 0
            for t in range(k):
                if scores[t, i] > 0.5:
                    r += 1
            out[i, 0] = k - r
            out[i, 1] = r
        return out

    @njit(cache=True)
    def confident_decisions_nb(counts, noise1, noise2, threshold):
        n = counts.shape[0]
        out = np.empty(n, dtype=np.int8)
        for i in range(n):
            f = float(counts[i, 0])
            r = float(counts[i, 1])
            top = max(f + noise1[i, 0], r + noise1[i, 1])
            if top < threshold:
                out[i] = -1
            elif r + noise2[i, 1] > f + noise2[i, 0]:
                out[i] = 1
            else:
                out[i] = 0
        return out


def _pick(nb_name, np_func):
    if USE_NUMBA:
        return globals()[nb_name]
    return np_func


outer_rows = _pick("outer_rows_nb", outer_rows_np)
clip_rows = _pick("clip_rows_nb", clip_rows_np)
clipped_sum = _pick("clipped_sum_nb", clipped_sum_np)
count_votes = _pick("count_votes_nb", count_votes_np)
confident_decisions = _pick("confident_decisions_nb", confident_decisions_np)


def backend():
    return "numba" if USE_NUMBA else "numpy"
