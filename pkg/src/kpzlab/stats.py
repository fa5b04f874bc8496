"""Statistical helpers: rate fits, jackknife, normality diagnostics, and a
numerically stable streaming reducer for replica ensembles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    ci_lo: float
    ci_hi: float
    n_points: int


def loglog_slope(x, y, confidence: float = 0.95) -> SlopeFit:
    """OLS slope of log y against log x with a t-based confidence band."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size or x.size < 2:
        raise ValueError("need at least two matched points for a slope fit")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive data")
    res = sps.linregress(np.log(x), np.log(y))
    if x.size > 2 and np.isfinite(res.stderr) and res.stderr > 0:
        half = sps.t.ppf(0.5 + confidence / 2, x.size - 2) * res.stderr
    else:
        half = np.inf if x.size <= 2 else 0.0
    return SlopeFit(slope=float(res.slope), intercept=float(res.intercept),
                    stderr=float(res.stderr) if np.isfinite(res.stderr) else float("nan"),
                    ci_lo=float(res.slope - half), ci_hi=float(res.slope + half),
                    n_points=int(x.size))


def jackknife_se(values: np.ndarray, statistic=np.mean) -> tuple[float, float]:
    """(statistic, leave-one-out jackknife standard error)."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        raise ValueError("jackknife needs at least two samples")
    full = float(statistic(values))
    loo = np.array([statistic(np.delete(values, i)) for i in range(n)])
    se = float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return full, se


def mean_with_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def skewness_with_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    n = values.size
    g1 = float(sps.skew(values, bias=False))
    se = np.sqrt(6.0 * n * (n - 1) / ((n - 2) * (n + 1) * (n + 3)))
    return g1, float(se)


def excess_kurtosis_with_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    n = values.size
    g2 = float(sps.kurtosis(values, bias=False))
    se_skew = np.sqrt(6.0 * n * (n - 1) / ((n - 2) * (n + 1) * (n + 3)))
    se = 2.0 * se_skew * np.sqrt((n * n - 1.0) / ((n - 3) * (n + 5)))
    return g2, float(se)


def anderson_darling_normal(values: np.ndarray) -> tuple[float, float, bool]:
    """(A^2 statistic, 1% critical value, passed) against a fitted normal."""
    res = sps.anderson(np.asarray(values, dtype=float), dist="norm")
    crit = float(res.critical_values[-1])  # significance levels [15,10,5,2.5,1]%
    stat = float(res.statistic)
    return stat, crit, stat < crit


def ks_two_sample(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    res = sps.ks_2samp(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return float(res.statistic), float(res.pvalue)


class StreamingMoments:
    """Mean/variance accumulator with pairwise-stable merging.

    Workers each fill one accumulator; the reducer merges them in a fixed
    order, so results are independent of scheduling.
    """

    __slots__ = ("n", "mean", "m2")

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def add_many(self, xs) -> None:
        for x in np.asarray(xs, dtype=float).reshape(-1):
            self.add(float(x))

    def merge(self, other: "StreamingMoments") -> "StreamingMoments":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean, other.m2
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean += delta * other.n / n
        self.m2 += other.m2 + delta * delta * self.n * other.n / n
        self.n = n
        return self

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else float("nan")

    @property
    def se_of_mean(self) -> float:
        return float(np.sqrt(self.variance / self.n)) if self.n > 1 else float("nan")
