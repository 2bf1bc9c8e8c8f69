"""Built-in base classifiers.

A base classifier maps one smoothed extended matrix to a class index and
exposes ``n_classes``. Classifiers here also implement ``classify_batch`` over
a :class:`~hiersmooth.sampling.SampleBatch`, which the sampler prefers when
present; both paths must agree.
"""

from __future__ import annotations

from typing import Callable, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy.special import ndtr

from .core import ExtendedMatrix, FeatureMatrix, SmoothingConfig
from .sampling import RngStream, SampleBatch, draw_batch


@runtime_checkable
class BaseClassifier(Protocol):
    n_classes: int

    def classify(self, z: ExtendedMatrix) -> int: ...


class UnknownClassifierError(KeyError):
    pass


class ConstantClassifier:
    def __init__(self, label: int = 0, n_classes: int = 2):
        if not 0 <= label < n_classes:
            raise ValueError(f"label {label} outside 0..{n_classes - 1}")
        self.label = label
        self.n_classes = n_classes

    def classify(self, z: ExtendedMatrix) -> int:
        return self.label

    def classify_batch(self, batch: SampleBatch) -> np.ndarray:
        return np.full(len(batch), self.label, dtype=np.int64)


class IndicatorParityClassifier:
    """Class = number of selected rows modulo 2."""

    n_classes = 2

    def classify(self, z: ExtendedMatrix) -> int:
        return int(z.indicator.sum()) % 2

    def classify_batch(self, batch: SampleBatch) -> np.ndarray:
        return batch.tau.sum(axis=1).astype(np.int64) % 2


class ThresholdClassifier:
    """Class 1 iff the sum of all (non-indicator) entries reaches ``threshold``."""

    n_classes = 2

    def __init__(self, threshold: float = 0.5):
        self.threshold = threshold

    def classify(self, z: ExtendedMatrix) -> int:
        return int(z.base.values.sum() >= self.threshold)

    def classify_batch(self, batch: SampleBatch) -> np.ndarray:
        return (batch.values.sum(axis=(1, 2)) >= self.threshold).astype(np.int64)


class CoinClassifier:
    """Stochastic classifier with exactly known vote probabilities under Gaussian noise.

    The noise added to cell ``(0, 0)`` is turned into a uniform draw
    ``u = Phi((w - x) / sigma)`` against the reference matrix ``x``; class ``c``
    is returned when ``u`` falls into the ``c``-th slice of ``probs``. If row 0
    is left unselected then ``u = 1/2`` deterministically, so the smoothed vote
    probability is ``p * probs[c] + (1 - p) * [c is the class at u = 1/2]``.
    """

    def __init__(self, probs: Sequence[float], reference: FeatureMatrix, sigma: float):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 2 or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
            raise ValueError("probs must be a distribution over at least two classes")
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.probs = probs
        self.edges = np.cumsum(probs)[:-1]
        self.reference = float(reference.values[0, 0])
        self.sigma = float(sigma)
        self.n_classes = probs.size

    def _label(self, u) -> np.ndarray:
        return np.searchsorted(self.edges, u, side="right").astype(np.int64)

    def classify(self, z: ExtendedMatrix) -> int:
        u = ndtr((float(z.base.values[0, 0]) - self.reference) / self.sigma)
        return int(self._label(u))

    def classify_batch(self, batch: SampleBatch) -> np.ndarray:
        u = ndtr((batch.values[:, 0, 0] - self.reference) / self.sigma)
        return self._label(u)

    def vote_probabilities(self, p_row0: float) -> np.ndarray:
        """Exact smoothed vote distribution when row 0 is selected w.p. ``p_row0``."""
        out = p_row0 * self.probs
        out[int(self._label(0.5))] += 1.0 - p_row0
        return out


def _features(values: np.ndarray, tau: np.ndarray, use_indicator: bool) -> np.ndarray:
    sums = values.sum(axis=-1)
    return np.concatenate([sums, tau.astype(np.float64)], axis=-1) if use_indicator else sums


class NearestCentroidClassifier:
    """Nearest class centroid over per-row sums, optionally with the indicator appended.

    Centroids are fitted on smoothed draws of labelled training matrices so
    that the classifier sees the same input distribution it is evaluated on.
    """

    def __init__(self, n_classes: int = 2, use_indicator: bool = False,
                 centroids: Optional[np.ndarray] = None):
        self.n_classes = n_classes
        self.use_indicator = use_indicator
        self.centroids = None if centroids is None else np.asarray(centroids, dtype=np.float64)

    def fit(self, records, config: SmoothingConfig, draws_per_record: int = 16,
            seed: int = 0) -> "NearestCentroidClassifier":
        if not records:
            raise ValueError("cannot fit centroids on an empty dataset")
        dim = None
        sums: dict[int, np.ndarray] = {}
        counts: dict[int, int] = {}
        rng = RngStream(seed, stream_id=0x5EED)
        for i, rec in enumerate(records):
            if not 0 <= rec.label < self.n_classes:
                raise ValueError(f"record {rec.id} has label {rec.label} outside 0..{self.n_classes - 1}")
            batch = draw_batch(rec.matrix, config, draws_per_record, rng.generator(i))
            f = _features(batch.values, batch.tau, self.use_indicator)
            dim = f.shape[1] if dim is None else dim
            if f.shape[1] != dim:
                raise ValueError("training matrices must share one shape")
            sums[rec.label] = sums.get(rec.label, 0.0) + f.sum(axis=0)
            counts[rec.label] = counts.get(rec.label, 0) + f.shape[0]
        cents = np.full((self.n_classes, dim), np.inf)
        for c, s in sums.items():
            cents[c] = s / counts[c]
        self.centroids = cents
        return self

    def _predict(self, f: np.ndarray) -> np.ndarray:
        if self.centroids is None:
            raise RuntimeError("classifier has not been fitted")
        d = ((f[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=-1)
        d = np.where(np.isfinite(d), d, np.inf)
        return np.argmin(d, axis=1).astype(np.int64)

    def classify(self, z: ExtendedMatrix) -> int:
        f = _features(z.base.values[None], z.indicator[None], self.use_indicator)
        return int(self._predict(f)[0])

    def classify_batch(self, batch: SampleBatch) -> np.ndarray:
        return self._predict(_features(batch.values, batch.tau, self.use_indicator))


def builtin_classifiers() -> dict[str, Callable]:
    return {
        "constant": ConstantClassifier,
        "parity": IndicatorParityClassifier,
        "threshold": ThresholdClassifier,
        "coin": CoinClassifier,
        "centroid": lambda n_classes=2: NearestCentroidClassifier(n_classes, use_indicator=False),
        "centroid-indicator": lambda n_classes=2: NearestCentroidClassifier(n_classes,
                                                                            use_indicator=True),
    }


def make_classifier(name: str, **kwargs):
    registry = builtin_classifiers()
    if name not in registry:
        raise UnknownClassifierError(
            f"unknown classifier {name!r}; choose from {', '.join(sorted(registry))}")
    return registry[name](**kwargs)
