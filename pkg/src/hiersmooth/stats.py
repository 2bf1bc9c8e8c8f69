"""Normal CDF/quantile, Clopper-Pearson bounds and log binomial coefficients."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

from scipy.special import betaincinv

_STD_NORMAL = NormalDist()
_SQRT2 = math.sqrt(2.0)


def std_normal_cdf(x: float) -> float:
    """Standard normal CDF; ``erfc`` keeps full relative accuracy in the lower tail."""
    if math.isnan(x):
        raise ValueError("std_normal_cdf of NaN")
    return 0.5 * math.erfc(-x / _SQRT2)


def std_normal_quantile(q: float) -> float:
    if not (0.0 < q < 1.0):
        raise ValueError(f"normal quantile needs q in (0, 1), got {q}")
    return _STD_NORMAL.inv_cdf(q)


def _check_counts(successes: int, n: int, alpha: float) -> None:
    if n < 1 or not (0 <= successes <= n):
        raise ValueError(f"need 0 <= successes <= n and n >= 1, got successes={successes}, n={n}")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def clopper_pearson_lower(successes: int, n: int, alpha: float) -> float:
    """One-sided ``1 - alpha`` Clopper-Pearson lower bound on a binomial proportion."""
    _check_counts(successes, n, alpha)
    if successes == 0:
        return 0.0
    return float(betaincinv(successes, n - successes + 1, alpha))


def clopper_pearson_upper(successes: int, n: int, alpha: float) -> float:
    """One-sided ``1 - alpha`` upper bound, by reflection of the lower bound."""
    _check_counts(successes, n, alpha)
    return 1.0 - clopper_pearson_lower(n - successes, n, alpha)


@dataclass(frozen=True)
class ConfidenceSpec:
    """Overall level ``alpha`` split evenly over ``n_bounds`` simultaneous bounds."""

    alpha: float
    n_bounds: int = 1

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.n_bounds < 1:
            raise ValueError("n_bounds must be positive")

    @property
    def per_bound(self) -> float:
        return self.alpha / self.n_bounds


def log_binomial(n: int, k: int) -> float:
    """``ln C(n, k)``; exact integer arithmetic for moderate ``n``, log-gamma beyond."""
    if n < 0 or not (0 <= k <= n):
        raise ValueError(f"log_binomial needs 0 <= k <= n, got n={n}, k={k}")
    if n <= 20_000:
        return math.log(math.comb(n, k))
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
