"""Worst-case bounds for hierarchical randomized smoothing.

All hierarchical bounds follow the same recipe: take the observed vote
probability, remove (lower bound) or rescale by (upper bound) the mass of the
rows an adversary can keep unselected, solve the lower-level worst case on the
rescaled budget and map the result back. ``delta`` throughout is the
probability that at least one perturbed row escapes selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np

from .core import (Ablation, ContinuousL2, DiscreteFlip, Gaussian, PerRow, Selection,
                   SmoothingConfig, SparseFlip, ThreatModel, Uniform)
from .stats import log_binomial, std_normal_cdf, std_normal_quantile

MERGE_TOL = 1e-12


class IncompatibleThreatError(ValueError):
    """The lower-level distribution cannot certify the requested threat model."""


# --- delta -------------------------------------------------------------------

@dataclass(frozen=True)
class DeltaValue:
    delta: float
    r_used: int

    def __post_init__(self):
        if not (0.0 <= self.delta <= 1.0):
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")

    def __float__(self) -> float:
        return self.delta


DeltaLike = Union[DeltaValue, float]


def _delta(d: DeltaLike) -> float:
    d = float(d)
    if not (0.0 <= d <= 1.0):
        raise ValueError(f"delta must lie in [0, 1], got {d}")
    return d


def _check_p(p: float, name: str = "p_y") -> None:
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {p}")


def delta_uniform(p: float, r: int) -> DeltaValue:
    """``1 - p**r``: chance that some of ``r`` perturbed rows is left unselected."""
    _check_p(p, "p")
    if r < 0:
        raise ValueError("r must be non-negative")
    if r == 0:
        return DeltaValue(0.0, 0)
    if p == 0.0:
        return DeltaValue(1.0, r)
    return DeltaValue(min(1.0, -math.expm1(r * math.log(p))), r)


def delta_nonuniform(ps: Sequence[float], r: int) -> DeltaValue:
    """Worst case over which rows are attacked: the ``r`` least likely to be selected."""
    if r < 0:
        raise ValueError("r must be non-negative")
    if r > len(ps):
        raise ValueError(f"radius r={r} exceeds the {len(ps)} rows")
    smallest = sorted(float(p) for p in ps)[:r]
    for p in smallest:
        _check_p(p, "p_i")
    if any(p == 0.0 for p in smallest):
        return DeltaValue(1.0 if r else 0.0, r)
    return DeltaValue(min(1.0, -math.expm1(sum(math.log(p) for p in smallest))), r)


def delta_fixed_ablation(N: int, k: int, r: int) -> DeltaValue:
    """Delta for ablating a uniformly drawn subset of exactly ``k`` of ``N`` rows."""
    if not (0 <= k <= N) or not (0 <= r <= N):
        raise ValueError(f"need 0 <= k, r <= N, got N={N}, k={k}, r={r}")
    if k > N - r:
        return DeltaValue(1.0, r)
    return DeltaValue(-math.expm1(log_binomial(N - r, k) - log_binomial(N, k)), r)


def delta_for(selection: Selection, r: int, n_rows: Optional[int] = None) -> DeltaValue:
    if isinstance(selection, Uniform):
        return delta_uniform(selection.p, r)
    if isinstance(selection, PerRow):
        return delta_nonuniform(selection.ps, r)
    raise TypeError(f"unknown selection {selection!r}")


# --- Gaussian lower level ----------------------------------------------------

def _quantile(q: float) -> float:
    if q <= 0.0:
        return -math.inf
    if q >= 1.0:
        return math.inf
    return std_normal_quantile(q)


def _cdf(x: float) -> float:
    if x == math.inf:
        return 1.0
    if x == -math.inf:
        return 0.0
    return std_normal_cdf(x)


def _check_sigma(sigma: float) -> None:
    if not (sigma > 0):
        raise ValueError(f"sigma must be positive, got {sigma}")


def gaussian_lower_bound(p_y: float, epsilon: float, sigma: float) -> float:
    _check_p(p_y)
    _check_sigma(sigma)
    if epsilon == 0:
        return p_y
    return _cdf(_quantile(p_y) - epsilon / sigma)


def gaussian_upper_bound(p_y: float, epsilon: float, sigma: float) -> float:
    _check_p(p_y)
    _check_sigma(sigma)
    if epsilon == 0:
        return p_y
    return _cdf(_quantile(p_y) + epsilon / sigma)


def _lower_budget(p_y: float, d: float) -> float:
    return min(1.0, max(0.0, (p_y - d) / (1.0 - d)))


def _upper_budget(p_y: float, d: float) -> float:
    return min(1.0, max(0.0, p_y / (1.0 - d)))


def hier_gaussian_lower(p_y: float, epsilon: float, sigma: float, delta: DeltaLike) -> float:
    _check_p(p_y)
    _check_sigma(sigma)
    d = _delta(delta)
    if d >= 1.0 or p_y <= d:
        return 0.0
    return gaussian_lower_bound(_lower_budget(p_y, d), epsilon, sigma) * (1.0 - d)


def hier_gaussian_upper(p_y: float, epsilon: float, sigma: float, delta: DeltaLike) -> float:
    _check_p(p_y)
    _check_sigma(sigma)
    d = _delta(delta)
    if d >= 1.0:
        return 1.0
    return min(1.0, gaussian_upper_bound(_upper_budget(p_y, d), epsilon, sigma) * (1.0 - d) + d)


def hier_gaussian_max_radius(p_y: float, sigma: float, delta: DeltaLike) -> float:
    """Supremum of the l2 magnitudes the binary-class test certifies.

    Returns ``math.inf`` when the rescaled vote probability saturates at 1 and
    ``0.0`` when nothing is certifiable (including every ``delta >= 1/2``).
    """
    _check_p(p_y)
    _check_sigma(sigma)
    d = _delta(delta)
    if d >= 0.5 or p_y <= d:
        return 0.0
    budget = _lower_budget(p_y, d)
    if budget >= 1.0:
        return math.inf
    radius = sigma * (_quantile(budget) - _quantile(1.0 / (2.0 * (1.0 - d))))
    return max(0.0, radius)


# --- discrete lower level: regions and the greedy linear program --------------

@dataclass(frozen=True, eq=False)
class RegionTable:
    """Constant likelihood-ratio regions, sorted by decreasing clean/perturbed ratio."""

    log_ratio: np.ndarray
    log_mass_clean: np.ndarray
    log_mass_perturbed: np.ndarray

    @classmethod
    def from_log_masses(cls, log_clean, log_perturbed, tol: float = MERGE_TOL) -> "RegionTable":
        lc = np.asarray(log_clean, dtype=np.float64).ravel()
        lp = np.asarray(log_perturbed, dtype=np.float64).ravel()
        keep = ~(np.isneginf(lc) & np.isneginf(lp))
        lc, lp = lc[keep], lp[keep]
        with np.errstate(invalid="ignore"):
            lr = np.where(np.isneginf(lp), np.inf, np.where(np.isneginf(lc), -np.inf, lc - lp))
        order = np.argsort(-lr, kind="stable")
        lr, lc, lp = lr[order], lc[order], lp[order]

        ratios, cleans, perts = [], [], []
        for r, c, p in zip(lr, lc, lp):
            if ratios and (r == ratios[-1] or (math.isfinite(r) and math.isfinite(ratios[-1])
                                               and abs(r - ratios[-1]) <= tol * max(1.0, abs(r)))):
                cleans[-1] = np.logaddexp(cleans[-1], c)
                perts[-1] = np.logaddexp(perts[-1], p)
            else:
                ratios.append(r)
                cleans.append(c)
                perts.append(p)
        arrs = [np.array(v, dtype=np.float64) for v in (ratios, cleans, perts)]
        for a in arrs:
            a.setflags(write=False)
        return cls(*arrs)

    @property
    def regions(self) -> list[tuple[float, float, float]]:
        return [(float(r), float(c), float(p)) for r, c, p in
                zip(self.log_ratio, self.log_mass_clean, self.log_mass_perturbed)]

    def __len__(self) -> int:
        return self.log_ratio.size


def _log_binom_pmf(k: np.ndarray, n: int, log_q: float, log_1mq: float) -> np.ndarray:
    logc = np.array([log_binomial(n, int(j)) for j in k])
    with np.errstate(invalid="ignore"):
        t1 = np.where(k == 0, 0.0, k * log_q)
        t2 = np.where(k == n, 0.0, (n - k) * log_1mq)
    return logc + t1 + t2


def _logs(q: float) -> tuple[float, float]:
    """(log q, log(1 - q)) with exact zeros mapped to -inf."""
    lq = math.log(q) if q > 0 else -math.inf
    l1q = math.log1p(-q) if q < 1 else -math.inf
    return lq, l1q


@lru_cache(maxsize=4096)
def sparse_regions(r_a: int, r_d: int, p_plus: float, p_minus: float) -> RegionTable:
    """Regions for sparse flip noise against ``r_a`` insertions and ``r_d`` deletions.

    Region ``(a, b)`` collects outcomes in which ``a`` of the inserted bits read 1
    and ``b`` of the deleted bits read 0; the likelihood ratio depends on
    ``(a, b)`` only because all untouched bits cancel.
    """
    if r_a < 0 or r_d < 0:
        raise ValueError("flip radii must be non-negative")
    for name, v in (("p_plus", p_plus), ("p_minus", p_minus)):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    lpp, l1pp = _logs(p_plus)
    lpm, l1pm = _logs(p_minus)
    a = np.arange(r_a + 1)
    b = np.arange(r_d + 1)
    # inserted dims: clean bit 0 reads 1 w.p. p_plus, perturbed bit 1 reads 1 w.p. 1 - p_minus
    add_clean = _log_binom_pmf(a, r_a, lpp, l1pp)
    add_pert = _log_binom_pmf(a, r_a, l1pm, lpm)
    # deleted dims: clean bit 1 reads 0 w.p. p_minus, perturbed bit 0 reads 0 w.p. 1 - p_plus
    del_clean = _log_binom_pmf(b, r_d, lpm, l1pm)
    del_pert = _log_binom_pmf(b, r_d, l1pp, lpp)
    log_clean = add_clean[:, None] + del_clean[None, :]
    log_pert = add_pert[:, None] + del_pert[None, :]
    return RegionTable.from_log_masses(log_clean, log_pert)


@lru_cache(maxsize=1)
def ablation_regions() -> RegionTable:
    """Ablated rows look identical under both inputs: a single ratio-1 region."""
    return RegionTable.from_log_masses([0.0], [0.0])


def _reachable(regions: RegionTable) -> float:
    live = regions.log_mass_clean > -np.inf
    return min(1.0, math.fsum(np.exp(regions.log_mass_perturbed[live])))


def _partial(amount: float, lr: float, lp: float) -> float:
    # amount / ratio in log space, never more than the region's perturbed mass
    return math.exp(min(math.log(amount) - lr, lp))


def discrete_lp_lower(regions: RegionTable, budget: float) -> float:
    """Minimum perturbed mass of any classifier with clean mass ``budget``."""
    _check_p(budget, "budget")
    if budget == 1.0:
        # all clean-reachable outcomes; avoids dividing rounding residue by tiny ratios
        return _reachable(regions)
    remaining = budget
    acc = 0.0
    for lr, lc, lp in zip(regions.log_ratio, regions.log_mass_clean, regions.log_mass_perturbed):
        if remaining <= 0.0:
            break
        if lc == -math.inf:
            continue
        c = math.exp(lc)
        if c <= remaining:
            remaining -= c
            acc += math.exp(lp)
        else:
            if lr != math.inf:
                acc += _partial(remaining, lr, lp)
            remaining = 0.0
    return min(acc, 1.0)


def discrete_lp_upper(regions: RegionTable, budget: float) -> float:
    """Maximum perturbed mass of any classifier with clean mass ``budget``."""
    _check_p(budget, "budget")
    if budget == 1.0:
        return 1.0
    remaining = budget
    acc = 0.0
    for lr, lc, lp in zip(regions.log_ratio[::-1], regions.log_mass_clean[::-1],
                          regions.log_mass_perturbed[::-1]):
        if lc == -math.inf:
            acc += math.exp(lp)
            continue
        if remaining <= 0.0:
            break
        c = math.exp(lc)
        if c <= remaining:
            remaining -= c
            acc += math.exp(lp)
        else:
            if lr != math.inf:
                acc += _partial(remaining, lr, lp)
            remaining = 0.0
    return min(acc, 1.0)


def hier_discrete_lower(p_y: float, delta: DeltaLike, regions: RegionTable) -> float:
    _check_p(p_y)
    d = _delta(delta)
    if d >= 1.0 or p_y <= d:
        return 0.0
    return discrete_lp_lower(regions, _lower_budget(p_y, d)) * (1.0 - d)


def hier_discrete_upper(p_y: float, delta: DeltaLike, regions: RegionTable) -> float:
    _check_p(p_y)
    d = _delta(delta)
    if d >= 1.0:
        return 1.0
    return min(1.0, discrete_lp_upper(regions, _upper_budget(p_y, d)) * (1.0 - d) + d)


# --- ablation lower level ----------------------------------------------------

def ablation_lower(p_y: float, delta: DeltaLike) -> float:
    _check_p(p_y)
    return max(p_y - _delta(delta), 0.0)


def ablation_upper(p_y: float, delta: DeltaLike) -> float:
    _check_p(p_y)
    return min(p_y + _delta(delta), 1.0)


# --- certifying a whole threat ball --------------------------------------------

def _check_pairing(config: SmoothingConfig, threat: ThreatModel) -> None:
    lower = config.lower
    if isinstance(lower, Gaussian) and not isinstance(threat, ContinuousL2):
        raise IncompatibleThreatError("Gaussian smoothing certifies l2 threat models only")
    if isinstance(lower, SparseFlip) and not isinstance(threat, DiscreteFlip):
        raise IncompatibleThreatError("sparse flip smoothing certifies flip threat models only")
    if not isinstance(threat, (ContinuousL2, DiscreteFlip)):
        raise IncompatibleThreatError(f"unknown threat model {threat!r}")


def ball_bounds(p_lower_A: float, p_upper_B: Optional[float], config: SmoothingConfig,
                threat: ThreatModel) -> tuple[float, Optional[float], DeltaValue]:
    """Worst-case lower bound for the top class and upper bound for the runner-up
    over every input in the ball, using delta at the ball's largest row count."""
    _check_pairing(config, threat)
    delta = delta_for(config.selection, threat.r)
    lower = config.lower
    if isinstance(lower, Gaussian):
        lo = hier_gaussian_lower(p_lower_A, threat.epsilon, lower.sigma, delta)
        up = None if p_upper_B is None else \
            hier_gaussian_upper(p_upper_B, threat.epsilon, lower.sigma, delta)
    elif isinstance(lower, SparseFlip):
        regions = sparse_regions(threat.r_a, threat.r_d, lower.p_plus, lower.p_minus)
        lo = hier_discrete_lower(p_lower_A, delta, regions)
        up = None if p_upper_B is None else hier_discrete_upper(p_upper_B, delta, regions)
    elif isinstance(lower, Ablation):
        lo = ablation_lower(p_lower_A, delta)
        up = None if p_upper_B is None else ablation_upper(p_upper_B, delta)
    else:
        raise TypeError(f"unknown lower-level distribution {lower!r}")
    return lo, up, delta


def certify_ball(p_lower_A: float, p_upper_B: Optional[float], config: SmoothingConfig,
                 threat: ThreatModel) -> tuple[bool, Optional[float]]:
    """Decide robustness over the threat ball.

    Without ``p_upper_B`` the binary-class test ``lower > 1/2`` is used and, for
    Gaussian noise, the largest certifiable l2 magnitude at the ball's row
    budget is returned as well. With ``p_upper_B`` the multi-class test
    ``lower(A) > upper(B)`` is used.
    """
    lo, up, delta = ball_bounds(p_lower_A, p_upper_B, config, threat)
    if up is None:
        certified = lo > 0.5
        max_eps = None
        if isinstance(config.lower, Gaussian):
            max_eps = hier_gaussian_max_radius(p_lower_A, config.lower.sigma, delta)
        return certified, max_eps
    return lo > up, None
