"""Monte-Carlo certification of single inputs and whole datasets."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from .certificates import certify_ball, delta_for
from .core import (ABSTAIN, CertificateRecord, DatasetRecord, Domain, FeatureMatrix,
                   SmoothingConfig, ThreatModel, Verdict, iter_threats)
from .sampling import RngStream, default_workers, sample_under_noise
from .stats import ConfidenceSpec, clopper_pearson_lower, clopper_pearson_upper


class Mode(str, Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"


@dataclass(frozen=True)
class CertifyParams:
    n0: int = 1000
    n1: int = 10000
    alpha: float = 0.01
    mode: Mode = Mode.BINARY

    def __post_init__(self):
        if self.n0 < 1 or self.n1 < 1:
            raise ValueError("n0 and n1 must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def confidence(self) -> ConfidenceSpec:
        return ConfidenceSpec(self.alpha, 1 if self.mode is Mode.BINARY else 2)


def _top_two(counts: Sequence[int]) -> tuple[int, int]:
    order = sorted(range(len(counts)), key=lambda c: (-counts[c], c))
    return order[0], order[1]


def certify_input(classifier, X: FeatureMatrix, config: SmoothingConfig,
                  threat: Union[ThreatModel, Sequence[ThreatModel]], params: CertifyParams,
                  rng: RngStream, sample_id: str = "", workers: Optional[int] = None
                  ) -> CertificateRecord:
    """Certify ``X`` for one threat model or a grid of them.

    The top class (and runner-up in multi-class mode) is picked from ``n0``
    draws; ``n1`` independent draws then give the confidence bounds. The same
    bounds are reused for every grid point. The prediction is withheld when
    the test already fails without any perturbation.
    """
    config.check_domain(X.domain)
    threats = list(iter_threats(threat))
    if not threats:
        raise ValueError("empty threat grid")
    if params.mode is Mode.MULTICLASS and classifier.n_classes < 2:
        raise ValueError("multi-class certification needs at least two classes")

    counts0 = sample_under_noise(classifier, X, config, params.n0, rng, phase=0, workers=workers)
    y_a, y_b = _top_two(counts0.counts) if classifier.n_classes > 1 else (0, None)
    counts1 = sample_under_noise(classifier, X, config, params.n1, rng, phase=1, workers=workers)

    alpha = params.confidence.per_bound
    p_lower = clopper_pearson_lower(counts1[y_a], params.n1, alpha)
    p_upper_b = None
    if params.mode is Mode.MULTICLASS:
        p_upper_b = clopper_pearson_upper(counts1[y_b], params.n1, alpha)
        abstain = not p_lower > p_upper_b
    else:
        abstain = not p_lower > 0.5

    verdicts = []
    for t in threats:
        certified, max_eps = certify_ball(p_lower, p_upper_b, config, t)
        delta = delta_for(config.selection, t.r).delta
        if abstain:
            certified, max_eps = False, None
        verdicts.append(Verdict(t, delta, certified, max_eps))

    return CertificateRecord(
        sample_id=sample_id,
        predicted=ABSTAIN if abstain else y_a,
        p_lower=p_lower,
        delta=verdicts[0].delta,
        verdicts=tuple(verdicts),
        p_upper_runner=p_upper_b,
        max_epsilon=verdicts[0].max_epsilon,
    )


@dataclass(frozen=True)
class Evaluation:
    clean_accuracy: float
    certified_accuracy: tuple
    records: tuple
    threats: tuple


def evaluate_dataset(classifier, dataset: Sequence[DatasetRecord], config: SmoothingConfig,
                     threat_grid: Union[ThreatModel, Sequence[ThreatModel]],
                     params: CertifyParams, seed: int = 0,
                     workers: Optional[int] = None) -> Evaluation:
    """Clean and certified accuracy of the smoothed classifier.

    Sample ``i`` always draws from stream ``(seed, i)``. Abstentions count as
    incorrect for both accuracies.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    threats = tuple(iter_threats(threat_grid))
    workers = default_workers() if workers is None else workers

    def run(i: int) -> CertificateRecord:
        rec = dataset[i]
        return certify_input(classifier, rec.matrix, config, threats, params,
                             RngStream(seed, i), sample_id=rec.id, workers=1)

    if workers > 1 and len(dataset) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run, range(len(dataset))))
    else:
        records = [run(i) for i in range(len(dataset))]

    correct = np.array([r.predicted == d.label for r, d in zip(records, dataset)])
    cert = np.array([[v.certified for v in r.verdicts] for r in records], dtype=bool)
    cert &= correct[:, None]
    n = len(dataset)
    return Evaluation(float(correct.sum()) / n, tuple(float(c) / n for c in cert.sum(axis=0)),
                      tuple(records), threats)


# --- synthetic data ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Row-structured data: every row of a class-``c`` sample is drawn around the
    class prototype, except corrupted rows which carry class-free noise."""

    n_samples: int
    n_rows: int
    n_cols: int
    domain: Domain = Domain.REAL
    class_separation: float = 1.0
    seed: int = 0
    n_classes: int = 2
    corruption: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "domain", Domain(self.domain))
        if self.n_samples < 1 or self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("n_samples, n_rows and n_cols must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.class_separation < 0:
            raise ValueError("class_separation must be non-negative")
        if not 0.0 <= self.corruption <= 1.0:
            raise ValueError("corruption must lie in [0, 1]")


def make_synthetic_dataset(spec: SyntheticSpec) -> list[DatasetRecord]:
    rng = np.random.default_rng(spec.seed)
    C, N, D = spec.n_classes, spec.n_rows, spec.n_cols
    labels = rng.permutation(np.arange(spec.n_samples) % C)
    # class offsets centred on zero, one step of size class_separation apart
    offsets = spec.class_separation * (np.arange(C) - (C - 1) / 2.0)
    out = []
    for i, y in enumerate(labels):
        corrupt = rng.random(N) < spec.corruption
        if spec.domain is Domain.REAL:
            vals = rng.standard_normal((N, D)) + np.where(corrupt, 0.0, offsets[y])[:, None]
        else:
            q = np.clip(0.5 + offsets[y] / max(C - 1, 1), 0.0, 1.0)
            probs = np.where(corrupt, 0.5, q)[:, None]
            vals = (rng.random((N, D)) < probs).astype(np.float64)
        out.append(DatasetRecord(f"s{i:05d}", int(y), FeatureMatrix(vals, spec.domain)))
    return out
