"""Domain types shared across the package.

Matrices are dense row-major ``float64`` arrays. Binary matrices use the same
storage and are validated to hold only 0/1 at construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

ABSTAIN = -1


class DimensionError(ValueError):
    """Shapes, lengths or domains of two objects do not match."""


class Domain(str, Enum):
    BINARY = "binary"
    REAL = "real"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class FeatureMatrix:
    """An ``N x D`` matrix whose rows are the entities an adversary may control."""

    __slots__ = ("_values", "_domain")

    def __init__(self, values, domain: Union[Domain, str] = Domain.REAL):
        domain = Domain(domain)
        arr = np.array(values, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"expected a non-empty 2-d matrix, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("matrix values must be finite")
        if domain is Domain.BINARY and not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError("binary matrix holds values other than 0 and 1")
        self._values = _frozen(arr)
        self._domain = domain

    @classmethod
    def from_flat(cls, n_rows: int, n_cols: int, values: Sequence[float],
                  domain: Union[Domain, str] = Domain.REAL) -> "FeatureMatrix":
        if n_rows < 1 or n_cols < 1:
            raise DimensionError("n_rows and n_cols must be positive")
        if len(values) != n_rows * n_cols:
            raise DimensionError(
                f"expected {n_rows * n_cols} values for a {n_rows}x{n_cols} matrix, got {len(values)}")
        return cls(np.asarray(values, dtype=np.float64).reshape(n_rows, n_cols), domain)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def domain(self) -> Domain:
        return self._domain

    @property
    def n_rows(self) -> int:
        return self._values.shape[0]

    @property
    def n_cols(self) -> int:
        return self._values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._values.shape

    def flat(self) -> list:
        if self._domain is Domain.BINARY:
            return [int(v) for v in self._values.ravel()]
        return [float(v) for v in self._values.ravel()]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return self._domain is other._domain and np.array_equal(self._values, other._values)

    def __hash__(self) -> int:
        return hash((self._domain, self.shape, self._values.tobytes()))

    def __repr__(self) -> str:
        return f"FeatureMatrix({self.n_rows}x{self.n_cols}, {self._domain.value})"


@dataclass(frozen=True, eq=False)
class ExtendedMatrix:
    """A smoothed matrix together with its row-selection indicator.

    ``ablated`` is only present for the ablation lower level; ablated rows hold
    zeros in ``base`` and are flagged so the token stays outside the data domain.
    Serialized layout is ``[values | ablated flag | indicator]``, so the
    indicator is always the last column.
    """

    base: FeatureMatrix
    indicator: np.ndarray
    ablated: Optional[np.ndarray] = None

    def __post_init__(self):
        ind = np.asarray(self.indicator, dtype=np.int8).copy()
        if ind.shape != (self.base.n_rows,):
            raise DimensionError(
                f"indicator length {ind.size} does not match {self.base.n_rows} rows")
        if not np.all((ind == 0) | (ind == 1)):
            raise ValueError("indicator entries must be 0 or 1")
        object.__setattr__(self, "indicator", _frozen(ind))
        if self.ablated is not None:
            abl = np.asarray(self.ablated, dtype=np.int8).copy()
            if abl.shape != (self.base.n_rows,):
                raise DimensionError("ablation flags must have one entry per row")
            object.__setattr__(self, "ablated", _frozen(abl))

    @property
    def width(self) -> int:
        return self.base.n_cols + 1 + (self.ablated is not None)

    def as_array(self) -> np.ndarray:
        cols = [self.base.values]
        if self.ablated is not None:
            cols.append(self.ablated[:, None].astype(np.float64))
        cols.append(self.indicator[:, None].astype(np.float64))
        return np.hstack(cols)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExtendedMatrix):
            return NotImplemented
        if (self.ablated is None) != (other.ablated is None):
            return False
        return (self.base == other.base
                and np.array_equal(self.indicator, other.indicator)
                and (self.ablated is None or np.array_equal(self.ablated, other.ablated)))

    __hash__ = None


def extend(X: FeatureMatrix, tau, ablated=None) -> ExtendedMatrix:
    return ExtendedMatrix(X, np.asarray(tau), None if ablated is None else np.asarray(ablated))


def split(Z: ExtendedMatrix) -> tuple[FeatureMatrix, np.ndarray]:
    return Z.base, Z.indicator.copy()


# --- threat models -----------------------------------------------------------

@dataclass(frozen=True)
class ContinuousL2:
    """Up to ``r`` rows change, total Frobenius change at most ``epsilon``."""

    r: int
    epsilon: float

    def __post_init__(self):
        if self.r < 0 or self.epsilon < 0 or not math.isfinite(self.epsilon):
            raise ValueError(f"invalid continuous threat model r={self.r}, epsilon={self.epsilon}")

    def label(self) -> str:
        return f"r={self.r};eps={self.epsilon:g}"


@dataclass(frozen=True)
class DiscreteFlip:
    """Up to ``r`` rows change with at most ``r_a`` 0->1 and ``r_d`` 1->0 flips."""

    r: int
    r_a: int
    r_d: int

    def __post_init__(self):
        if min(self.r, self.r_a, self.r_d) < 0:
            raise ValueError(f"invalid discrete threat model {self}")

    def label(self) -> str:
        return f"r={self.r};ra={self.r_a};rd={self.r_d}"


ThreatModel = Union[ContinuousL2, DiscreteFlip]


# --- smoothing configuration -------------------------------------------------

def _check_prob(name: str, v: float) -> None:
    if not (0.0 <= v <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class Uniform:
    p: float

    def __post_init__(self):
        _check_prob("p", self.p)

    def probs(self, n: int) -> np.ndarray:
        return np.full(n, self.p)


@dataclass(frozen=True)
class PerRow:
    ps: tuple

    def __post_init__(self):
        ps = tuple(float(v) for v in self.ps)
        for v in ps:
            _check_prob("per-row p", v)
        object.__setattr__(self, "ps", ps)

    def probs(self, n: int) -> np.ndarray:
        if len(self.ps) != n:
            raise DimensionError(f"{len(self.ps)} selection probabilities for {n} rows")
        return np.asarray(self.ps)


@dataclass(frozen=True)
class Gaussian:
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class SparseFlip:
    """Flip 0->1 with ``p_plus`` and 1->0 with ``p_minus`` on selected rows."""

    p_plus: float
    p_minus: float

    def __post_init__(self):
        _check_prob("p_plus", self.p_plus)
        _check_prob("p_minus", self.p_minus)


@dataclass(frozen=True)
class Ablation:
    pass


Selection = Union[Uniform, PerRow]


def check_lower_domain(lower, domain: Domain) -> None:
    if isinstance(lower, Gaussian) and domain is not Domain.REAL:
        raise DimensionError("Gaussian noise requires a real-valued matrix")
    if isinstance(lower, SparseFlip) and domain is not Domain.BINARY:
        raise DimensionError("sparse flip noise requires a binary matrix")


LowerLevel = Union[Gaussian, SparseFlip, Ablation]


@dataclass(frozen=True)
class SmoothingConfig:
    selection: Selection
    lower: LowerLevel

    @classmethod
    def uniform(cls, p: float, lower: LowerLevel) -> "SmoothingConfig":
        return cls(Uniform(p), lower)

    def check_domain(self, domain: Domain) -> None:
        check_lower_domain(self.lower, domain)

    def describe(self) -> dict:
        out: dict = {}
        if isinstance(self.selection, Uniform):
            out["p"] = self.selection.p
        else:
            out["ps"] = list(self.selection.ps)
        if isinstance(self.lower, Gaussian):
            out.update(lower="gaussian", sigma=self.lower.sigma)
        elif isinstance(self.lower, SparseFlip):
            out.update(lower="sparse", p_plus=self.lower.p_plus, p_minus=self.lower.p_minus)
        else:
            out.update(lower="ablation")
        return out


# --- votes and certificates --------------------------------------------------

@dataclass(frozen=True)
class VoteCounts:
    counts: tuple
    n: int

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ValueError("vote counts must be non-negative")
        if sum(counts) != self.n:
            raise ValueError(f"vote counts sum to {sum(counts)}, expected {self.n}")
        object.__setattr__(self, "counts", counts)

    def __getitem__(self, c: int) -> int:
        return self.counts[c]

    def __add__(self, other: "VoteCounts") -> "VoteCounts":
        if len(self.counts) != len(other.counts):
            raise DimensionError("cannot merge vote counts over different class sets")
        return VoteCounts(tuple(a + b for a, b in zip(self.counts, other.counts)),
                          self.n + other.n)


@dataclass(frozen=True)
class Verdict:
    threat: ThreatModel
    delta: float
    certified: bool
    max_epsilon: Optional[float] = None


@dataclass(frozen=True)
class CertificateRecord:
    sample_id: str
    predicted: int
    p_lower: float
    delta: float
    verdicts: tuple = ()
    p_upper_runner: Optional[float] = None
    max_epsilon: Optional[float] = None

    @property
    def abstained(self) -> bool:
        return self.predicted == ABSTAIN

    def to_json(self) -> dict:
        def _eps(v):
            if v is None:
                return None
            return "inf" if math.isinf(v) else v

        return {
            "sample_id": self.sample_id,
            "predicted": self.predicted,
            "abstained": self.abstained,
            "p_lower": self.p_lower,
            "p_upper_runner": self.p_upper_runner,
            "delta": self.delta,
            "max_epsilon": _eps(self.max_epsilon),
            "verdicts": [
                {"radius_spec": v.threat.label(), "delta": v.delta, "certified": v.certified,
                 "max_epsilon": _eps(v.max_epsilon)}
                for v in self.verdicts
            ],
        }


# --- distances and the threat ball -------------------------------------------

def _check_pair(X: FeatureMatrix, Xt: FeatureMatrix) -> None:
    if X.shape != Xt.shape:
        raise DimensionError(f"shape mismatch {X.shape} vs {Xt.shape}")
    if X.domain is not Xt.domain:
        raise DimensionError(f"domain mismatch {X.domain.value} vs {Xt.domain.value}")


def row_distance(X: FeatureMatrix, Xt: FeatureMatrix) -> tuple[frozenset, float]:
    """Return the set of changed rows and the Frobenius norm of the difference."""
    _check_pair(X, Xt)
    diff = X.values - Xt.values
    changed = frozenset(int(i) for i in np.flatnonzero(np.any(diff != 0, axis=1)))
    return changed, float(np.linalg.norm(diff))


def flip_counts(X: FeatureMatrix, Xt: FeatureMatrix) -> tuple[int, int]:
    """Insertions (0->1) and deletions (1->0) needed to turn ``X`` into ``Xt``."""
    _check_pair(X, Xt)
    if X.domain is not Domain.BINARY:
        raise DimensionError("flip counts are defined for binary matrices only")
    ins = int(np.sum((X.values == 0) & (Xt.values == 1)))
    dels = int(np.sum((X.values == 1) & (Xt.values == 0)))
    return ins, dels


def in_ball(X: FeatureMatrix, Xt: FeatureMatrix, threat: ThreatModel) -> bool:
    changed, l2 = row_distance(X, Xt)
    if len(changed) > threat.r:
        return False
    if isinstance(threat, ContinuousL2):
        if X.domain is not Domain.REAL:
            raise DimensionError("continuous threat model needs a real-valued matrix")
        return l2 <= threat.epsilon
    ins, dels = flip_counts(X, Xt)
    return ins <= threat.r_a and dels <= threat.r_d


# --- dataset files -----------------------------------------------------------

@dataclass(frozen=True)
class DatasetRecord:
    id: str
    label: int
    matrix: FeatureMatrix = field(repr=False)

    def to_json(self) -> dict:
        m = self.matrix
        return {"id": self.id, "label": self.label, "n_rows": m.n_rows, "n_cols": m.n_cols,
                "domain": m.domain.value, "values": m.flat()}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetRecord":
        try:
            matrix = FeatureMatrix.from_flat(int(obj["n_rows"]), int(obj["n_cols"]),
                                             obj["values"], obj["domain"])
            return cls(str(obj["id"]), int(obj["label"]), matrix)
        except KeyError as e:
            raise ValueError(f"dataset record is missing field {e}") from None


def dumps_dataset(records: Iterable[DatasetRecord]) -> str:
    return "".join(json.dumps(r.to_json(), separators=(",", ":")) + "\n" for r in records)


def loads_dataset(text: str) -> list[DatasetRecord]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(DatasetRecord.from_json(json.loads(line)))
        except (ValueError, TypeError) as e:
            raise ValueError(f"line {lineno}: {e}") from None
    return out


def read_dataset(path: Union[str, Path]) -> list[DatasetRecord]:
    return loads_dataset(Path(path).read_text(encoding="utf-8"))


def write_dataset(path: Union[str, Path], records: Iterable[DatasetRecord]) -> None:
    Path(path).write_text(dumps_dataset(records), encoding="utf-8")


def iter_threats(grid: Union[ThreatModel, Sequence[ThreatModel]]) -> Iterator[ThreatModel]:
    if isinstance(grid, (ContinuousL2, DiscreteFlip)):
        yield grid
    else:
        yield from grid
