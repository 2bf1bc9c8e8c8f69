"""Brute-force ground truth for small binary instances.

The full joint outcome space ``(W, tau)`` of the hierarchical distribution is
enumerated with exact masses under the clean and the perturbed input, and the
worst-case classifier is found greedily at the granularity of single outcomes.
Nothing here uses the region construction from :mod:`certificates`, so the
two can be compared against each other.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .core import (Ablation, Domain, ExtendedMatrix, FeatureMatrix, SmoothingConfig, SparseFlip,
                   Uniform, flip_counts, row_distance)
from .stats import std_normal_cdf

MAX_ROWS = 4
MAX_COLS = 3


class EnumerationLimitError(ValueError):
    """Instance too large (or of the wrong kind) for exhaustive enumeration."""


@dataclass(frozen=True, eq=False)
class OutcomeAtom:
    z: ExtendedMatrix
    prob_clean: float
    prob_perturbed: float


@dataclass(frozen=True, eq=False)
class AtomTable:
    """All outcomes with mass under either input, stored column-wise.

    ``rows[k, i]`` is the state of row ``i`` in atom ``k``: ``0..2**D - 1`` for
    the bit pattern (most significant bit = column 0) and ``2**D`` for an
    ablated row. ``tau[k, i]`` is the selection bit.
    """

    tau: np.ndarray
    rows: np.ndarray
    prob_clean: np.ndarray
    prob_perturbed: np.ndarray
    n_cols: int

    def __len__(self) -> int:
        return self.prob_clean.size

    def atom(self, k: int) -> OutcomeAtom:
        D = self.n_cols
        token = 1 << D
        ablated = self.rows[k] == token
        bits = [[0] * D if s == token else [(int(s) >> (D - 1 - j)) & 1 for j in range(D)]
                for s in self.rows[k]]
        base = FeatureMatrix(bits, Domain.BINARY)
        z = ExtendedMatrix(base, self.tau[k], ablated.astype(np.int8) if ablated.any() else None)
        return OutcomeAtom(z, float(self.prob_clean[k]), float(self.prob_perturbed[k]))

    def __iter__(self):
        return (self.atom(k) for k in range(len(self)))


def _row_state(row: np.ndarray) -> int:
    s = 0
    for v in row:
        s = (s << 1) | int(v)
    return s


def _row_outcomes(x: np.ndarray, p_sel: float, lower) -> np.ndarray:
    """Joint ``(tau_i, w_i)`` distribution of one row, flattened as ``tau_i * S + w_i``."""
    D = x.size
    S = (1 << D) + 1
    out = np.zeros(2 * S)
    out[_row_state(x)] = 1.0 - p_sel
    if isinstance(lower, Ablation):
        out[S + (1 << D)] = p_sel
        return out
    for w in range(1 << D):
        m = 1.0
        for j in range(D):
            wb = (w >> (D - 1 - j)) & 1
            if x[j] == 0:
                m *= lower.p_plus if wb else 1.0 - lower.p_plus
            else:
                m *= 1.0 - lower.p_minus if wb else lower.p_minus
        out[S + w] = p_sel * m
    return out


def _joint(X: np.ndarray, probs: np.ndarray, lower) -> np.ndarray:
    out = np.ones(1)
    for i in range(X.shape[0]):
        out = np.kron(out, _row_outcomes(X[i], probs[i], lower))
    return out


def enumerate_outcomes(X: FeatureMatrix, Xt: FeatureMatrix, config: SmoothingConfig) -> AtomTable:
    """Every ``(W, tau)`` with non-zero mass under either input, with exact masses."""
    if X.domain is not Domain.BINARY or Xt.domain is not Domain.BINARY:
        raise EnumerationLimitError("exhaustive enumeration supports binary matrices only")
    if X.shape != Xt.shape:
        raise EnumerationLimitError(f"shape mismatch {X.shape} vs {Xt.shape}")
    N, D = X.shape
    if N > MAX_ROWS or D > MAX_COLS:
        raise EnumerationLimitError(f"{N}x{D} exceeds the enumeration bound {MAX_ROWS}x{MAX_COLS}")
    if not isinstance(config.lower, (SparseFlip, Ablation)):
        raise EnumerationLimitError("enumeration needs a sparse flip or ablation lower level")
    probs = config.selection.probs(N)
    clean = _joint(X.values.astype(np.int64), probs, config.lower)
    pert = _joint(Xt.values.astype(np.int64), probs, config.lower)
    keep = np.flatnonzero((clean > 0) | (pert > 0))

    S = (1 << D) + 1
    digits = np.empty((keep.size, N), dtype=np.int64)
    rest = keep.copy()
    for i in range(N - 1, -1, -1):
        digits[:, i] = rest % (2 * S)
        rest //= 2 * S
    tau = (digits >= S).astype(np.int8)
    rows = digits % S
    return AtomTable(tau, rows, clean[keep], pert[keep], D)


AtomsLike = Union[AtomTable, Sequence[OutcomeAtom]]


def _masses(atoms: AtomsLike) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(atoms, AtomTable):
        return atoms.prob_clean, atoms.prob_perturbed
    pc = np.array([a.prob_clean for a in atoms], dtype=np.float64)
    pp = np.array([a.prob_perturbed for a in atoms], dtype=np.float64)
    return pc, pp


def _greedy(pc: np.ndarray, pp: np.ndarray, budgets: np.ndarray, descending: bool) -> np.ndarray:
    """Fill ``budgets`` of clean mass in ratio order and report perturbed mass collected."""
    with np.errstate(divide="ignore"):
        ratio = np.where(pp > 0, pc / np.where(pp > 0, pp, 1.0), np.inf)
    order = np.argsort(-ratio if descending else ratio, kind="stable")
    pc, pp = pc[order], pp[order]
    cum_c = np.concatenate([[0.0], np.cumsum(pc)])
    cum_p = np.concatenate([[0.0], np.cumsum(pp)])
    k = np.searchsorted(cum_c[1:], budgets, side="left")
    k = np.minimum(k, pc.size - 1)
    frac = np.clip(budgets - cum_c[k], 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        part = np.where(pc[k] > 0, frac * pp[k] / np.where(pc[k] > 0, pc[k], 1.0), 0.0)
    part = np.minimum(part, pp[k])
    out = cum_p[k] + part
    return np.where(budgets <= 0.0, 0.0, np.minimum(out, 1.0))


def _budgets(budget) -> tuple[np.ndarray, bool]:
    b = np.atleast_1d(np.asarray(budget, dtype=np.float64))
    if np.any((b < 0) | (b > 1)) or np.any(np.isnan(b)):
        raise ValueError(f"budget must lie in [0, 1], got {budget}")
    return b, np.ndim(budget) == 0


def exact_worst_case_lower(atoms: AtomsLike, budget):
    """Least perturbed mass any classifier with clean mass ``budget`` can keep.

    Accepts a scalar or an array of budgets.
    """
    pc, pp = _masses(atoms)
    b, scalar = _budgets(budget)
    live = pc > 0  # outcomes impossible under the clean input are never worth taking
    out = _greedy(pc[live], pp[live], b, descending=True)
    return float(out[0]) if scalar else out


def exact_worst_case_upper(atoms: AtomsLike, budget):
    """Most perturbed mass any classifier with clean mass ``budget`` can collect."""
    pc, pp = _masses(atoms)
    b, scalar = _budgets(budget)
    live = pc > 0
    free = float(pp[~live].sum())
    out = np.minimum(free + _greedy(pc[live], pp[live], b, descending=False), 1.0)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class RegionMasses:
    """Clean and perturbed mass of the outcome regions induced by a perturbed row set.

    R2 holds outcomes where every perturbed row is selected; outside R2 the
    unselected perturbed rows are copied verbatim, so each outcome is reachable
    from exactly one of the two inputs (R1 from the clean one, R3 from the
    perturbed one).
    """

    r1_clean: float
    r1_perturbed: float
    r2_clean: float
    r2_perturbed: float
    r3_clean: float
    r3_perturbed: float


def region_masses(atoms: AtomTable, changed_rows: Iterable[int]) -> RegionMasses:
    C = sorted(changed_rows)
    in_r2 = np.all(atoms.tau[:, C] == 1, axis=1) if C else np.ones(len(atoms), dtype=bool)
    outside = ~in_r2
    r1 = outside & (atoms.prob_clean > 0)
    r3 = outside & (atoms.prob_perturbed > 0)
    pc, pp = atoms.prob_clean, atoms.prob_perturbed
    return RegionMasses(float(pc[r1].sum()), float(pp[r1].sum()),
                        float(pc[in_r2].sum()), float(pp[in_r2].sum()),
                        float(pc[r3].sum()), float(pp[r3].sum()))


def gaussian_halfspace_check(p_y: float, dist: float, sigma: float) -> float:
    """Worst-case vote probability under an l2 shift of size ``dist``.

    Projected onto the shift direction, the clean noise is ``N(0, sigma^2)`` and
    the perturbed noise ``N(dist, sigma^2)``. The worst set is the halfspace
    ``{s <= t}`` with ``t`` found by bisection so that its clean mass is ``p_y``.
    """
    if not (0.0 <= p_y <= 1.0):
        raise ValueError(f"p_y must lie in [0, 1], got {p_y}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if dist == 0 or p_y in (0.0, 1.0):
        return p_y
    # bisect on the tail holding less mass so the target keeps full relative precision
    upper_tail = p_y > 0.5
    target = 1.0 - p_y if upper_tail else p_y
    lo, hi = -40.0, 0.0  # standardized threshold in the lower tail
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if std_normal_cdf(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-17 * max(1.0, abs(mid)):
            break
    s = 0.5 * (lo + hi)
    t = -s * sigma if upper_tail else s * sigma
    return std_normal_cdf((t - dist) / sigma)


# --- the gating grid -------------------------------------------------------------

@dataclass(frozen=True)
class OracleGrid:
    n_rows: Sequence[int] = (1, 2, 3)
    n_cols: Sequence[int] = (1, 2)
    p_values: Sequence[float] = (0.5, 0.8, 1.0)
    flips: Sequence[tuple] = ((0.1, 0.4), (0.05, 0.9), (0.5, 0.5))
    p_y: Sequence[float] = tuple(round(0.05 * i, 2) for i in range(21))
    pairs_per_set: int = 3
    seed: int = 0


@dataclass(frozen=True)
class Instance:
    X: FeatureMatrix
    Xt: FeatureMatrix
    changed: tuple
    r_a: int
    r_d: int

    def describe(self) -> str:
        return (f"X={self.X.flat()} Xt={self.Xt.flat()} shape={self.X.n_rows}x{self.X.n_cols} "
                f"rows={list(self.changed)} ra={self.r_a} rd={self.r_d}")


def grid_instances(grid: OracleGrid) -> list[Instance]:
    """Clean/perturbed pairs for every shape and every non-empty perturbed row set."""
    rng = np.random.default_rng(grid.seed)
    out = []
    for N in grid.n_rows:
        for D in grid.n_cols:
            for size in range(1, N + 1):
                for C in itertools.combinations(range(N), size):
                    for _ in range(grid.pairs_per_set):
                        x = rng.integers(0, 2, size=(N, D))
                        xt = x.copy()
                        for i in C:
                            mask = rng.integers(0, 2, size=D).astype(bool)
                            if not mask.any():
                                mask[rng.integers(D)] = True
                            xt[i, mask] ^= 1
                        X = FeatureMatrix(x, Domain.BINARY)
                        Xt = FeatureMatrix(xt, Domain.BINARY)
                        changed, _ = row_distance(X, Xt)
                        assert changed == frozenset(C)
                        r_a, r_d = flip_counts(X, Xt)
                        out.append(Instance(X, Xt, tuple(C), r_a, r_d))
    return out


@dataclass
class IdentityResult:
    name: str
    checked: int = 0
    max_error: float = 0.0
    failure: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.failure is None

    def record(self, err: float, tol: float, where: Callable[[], str]) -> None:
        self.checked += 1
        if not err <= self.max_error:
            self.max_error = err if not math.isnan(err) else math.inf
        if self.failure is None and not err <= tol:
            self.failure = where()


@dataclass
class OracleReport:
    tolerance: float
    region_tolerance: float
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def table(self) -> str:
        lines = [f"{'identity':<28} {'checked':>8} {'max_error':>12}  status"]
        for r in self.results:
            lines.append(f"{r.name:<28} {r.checked:>8} {r.max_error:>12.3e}  "
                         f"{'PASS' if r.passed else 'FAIL'}")
        for r in self.results:
            if not r.passed:
                lines.append(f"{r.name} failed at {r.failure}")
        return "\n".join(lines)


def run_oracle_suite(grid: OracleGrid = OracleGrid(), tolerance: float = 1e-9,
                     region_tolerance: float = 1e-12,
                     corrupt: Optional[Callable] = None) -> OracleReport:
    """Compare the region-based certificates with exhaustive enumeration on ``grid``.

    ``corrupt`` maps each region table before use; it exists for fault injection.
    """
    from .certificates import (ablation_lower, ablation_upper, delta_uniform,
                               hier_discrete_lower, hier_discrete_upper, sparse_regions)

    lower = IdentityResult("hierarchical lower")
    upper = IdentityResult("hierarchical upper")
    regions_ok = IdentityResult("region accounting")
    abl = IdentityResult("ablation equivalence")
    py = np.asarray(grid.p_y, dtype=np.float64)

    for inst in grid_instances(grid):
        for p in grid.p_values:
            delta = delta_uniform(p, len(inst.changed))
            d = delta.delta
            for pp_, pm_ in grid.flips:
                cfg = SmoothingConfig(Uniform(p), SparseFlip(pp_, pm_))
                atoms = enumerate_outcomes(inst.X, inst.Xt, cfg)
                table = sparse_regions(inst.r_a, inst.r_d, pp_, pm_)
                if corrupt is not None:
                    table = corrupt(table)
                ex_lo = exact_worst_case_lower(atoms, py)
                ex_up = exact_worst_case_upper(atoms, py)
                for j, y in enumerate(py):
                    def where(kind, got, want, y=y):
                        return (f"{inst.describe()} p={p} p_plus={pp_} p_minus={pm_} "
                                f"p_y={y:g}: {kind} {got!r} vs oracle {want!r}")
                    got = hier_discrete_lower(float(y), delta, table)
                    lower.record(abs(got - ex_lo[j]), tolerance,
                                 lambda: where("lower", got, float(ex_lo[j])))
                    got_u = hier_discrete_upper(float(y), delta, table)
                    upper.record(abs(got_u - ex_up[j]), tolerance,
                                 lambda: where("upper", got_u, float(ex_up[j])))

                m = region_masses(atoms, inst.changed)
                err = max(abs(m.r1_clean - d), abs(m.r3_perturbed - d),
                          abs(m.r2_clean - (1 - d)), abs(m.r2_perturbed - (1 - d)),
                          m.r1_perturbed, m.r3_clean)
                regions_ok.record(err, region_tolerance,
                                  lambda: f"{inst.describe()} p={p} p_plus={pp_} p_minus={pm_}: "
                                          f"{m}, delta={d!r}")

            atoms = enumerate_outcomes(inst.X, inst.Xt, SmoothingConfig(Uniform(p), Ablation()))
            ex_lo = exact_worst_case_lower(atoms, py)
            ex_up = exact_worst_case_upper(atoms, py)
            for j, y in enumerate(py):
                err = max(abs(ablation_lower(float(y), delta) - ex_lo[j]),
                          abs(ablation_upper(float(y), delta) - ex_up[j]))
                abl.record(err, tolerance,
                           lambda: f"{inst.describe()} p={p} ablation p_y={y:g}")

    return OracleReport(tolerance, region_tolerance, [lower, upper, regions_ok, abl])


def swap_region_masses(table):
    """Fault injection: exchange the perturbed masses of the first and last region."""
    from .certificates import RegionTable

    if len(table) < 2:
        return table
    pert = table.log_mass_perturbed.copy()
    pert[0], pert[-1] = pert[-1], pert[0]
    return RegionTable(table.log_ratio, table.log_mass_clean, pert)
