"""Statistical reporting: ECDFs, ECDF-correlation similarity, confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DataError, ZeroVarianceError


@dataclass(frozen=True)
class Ecdf:
    """Right-continuous empirical distribution function F(x) = #{samples <= x} / N."""

    support: np.ndarray  # sorted unique sample values
    probabilities: np.ndarray  # cumulative step heights, last value 1.0

    def evaluate(self, x: np.ndarray | float) -> np.ndarray | float:
        idx = np.searchsorted(self.support, x, side="right")
        padded = np.concatenate([[0.0], self.probabilities])
        out = padded[idx]
        return float(out) if np.isscalar(x) else out


def ecdf(samples: np.ndarray) -> Ecdf:
    values = np.asarray(samples, dtype=np.float64).ravel()
    if values.size == 0:
        raise DataError("cannot build an ECDF from zero samples")
    if not np.isfinite(values).all():
        raise DataError("samples contain non-finite values")
    support, counts = np.unique(values, return_counts=True)
    return Ecdf(support=support, probabilities=np.cumsum(counts) / values.size)


def ecdf_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two ECDFs evaluated on their merged support.

    Used as the distribution-similarity score between measured and simulated
    per-transmission data rates.
    """
    fa, fb = ecdf(a), ecdf(b)
    grid = np.union1d(fa.support, fb.support)
    va = fa.evaluate(grid)
    vb = fb.evaluate(grid)
    if np.ptp(va) == 0.0 or np.ptp(vb) == 0.0:
        raise ZeroVarianceError(
            "ECDF evaluation vector is constant (all sample mass at one point)"
        )
    return float(np.corrcoef(va, vb)[0, 1])


def mean_ci(samples: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    """Student-t confidence interval of the mean: (mean, half-width)."""
    values = np.asarray(samples, dtype=np.float64).ravel()
    if values.size < 2:
        raise DataError(f"need at least 2 samples for a confidence interval, got {values.size}")
    if not 0.0 < level < 1.0:
        raise DataError(f"confidence level must be in (0, 1), got {level}")
    mean = float(values.mean())
    s = float(values.std(ddof=1))
    t = float(stats.t.ppf(0.5 + level / 2.0, values.size - 1))
    return mean, float(t * s / np.sqrt(values.size))
