"""Drawing from the hierarchical smoothing distribution.

Each draw first selects rows with independent Bernoulli coins and then adds
lower-level noise to the selected rows only; unselected rows are copied
verbatim. Randomness comes from counter-based substreams keyed by
``(seed, stream_id, phase, block)`` so vote counts do not depend on how
blocks are scheduled across workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .core import (Ablation, Domain, ExtendedMatrix, FeatureMatrix, Gaussian, LowerLevel,
                   Selection, SmoothingConfig, SparseFlip, VoteCounts,
                   check_lower_domain)

BLOCK_SIZE = 1024
WORKERS_ENV = "HIERSMOOTH_WORKERS"
_MASK64 = (1 << 64) - 1


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


class SamplingError(RuntimeError):
    """The base classifier raised while labelling a smoothed sample."""

    def __init__(self, message: str, sample_index: int):
        super().__init__(message)
        self.sample_index = sample_index


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def generator(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & _MASK64,
                                    spawn_key=(self.stream_id & _MASK64, *key))
        return np.random.Generator(np.random.PCG64(ss))

    def substream(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)


RngLike = Union[RngStream, np.random.Generator]


def _as_generator(rng: RngLike) -> np.random.Generator:
    return rng.generator() if isinstance(rng, RngStream) else rng


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """``b`` smoothed draws of one matrix, stored as stacked arrays."""

    values: np.ndarray            # (b, N, D)
    tau: np.ndarray               # (b, N) int8
    ablated: Optional[np.ndarray]  # (b, N) int8 or None
    domain: Domain

    def __len__(self) -> int:
        return self.values.shape[0]

    def extended(self, i: int) -> ExtendedMatrix:
        base = FeatureMatrix(self.values[i], self.domain)
        abl = None if self.ablated is None else self.ablated[i]
        return ExtendedMatrix(base, self.tau[i], abl)

    def as_array(self) -> np.ndarray:
        """Classifier input of shape ``(b, N, width)``, indicator in the last column."""
        cols = [self.values]
        if self.ablated is not None:
            cols.append(self.ablated[..., None].astype(np.float64))
        cols.append(self.tau[..., None].astype(np.float64))
        return np.concatenate(cols, axis=-1)


def _draw_tau(size: int, n: int, selection: Selection, gen: np.random.Generator) -> np.ndarray:
    probs = selection.probs(n)
    return (gen.random((size, n)) < probs).astype(np.int8)


def _noise(x: np.ndarray, tau: np.ndarray, lower: LowerLevel, gen: np.random.Generator):
    size = tau.shape[0]
    sel = tau.astype(bool)[:, :, None]
    base = np.broadcast_to(x, (size,) + x.shape)
    if isinstance(lower, Gaussian):
        noisy = base + lower.sigma * gen.standard_normal(base.shape)
        return np.where(sel, noisy, base), None
    if isinstance(lower, SparseFlip):
        flip_prob = np.where(x == 1.0, lower.p_minus, lower.p_plus)
        flipped = gen.random(base.shape) < flip_prob
        return np.where(sel & flipped, 1.0 - base, base), None
    if isinstance(lower, Ablation):
        return np.where(sel, 0.0, base), tau.copy()
    raise TypeError(f"unknown lower-level distribution {lower!r}")


def sample_tau(n: int, selection: Selection, rng: RngLike) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one row")
    return _draw_tau(1, n, selection, _as_generator(rng))[0]


def apply_lower_noise(X: FeatureMatrix, tau, lower: LowerLevel, rng: RngLike) -> ExtendedMatrix:
    check_lower_domain(lower, X.domain)
    tau = np.asarray(tau, dtype=np.int8)
    if tau.shape != (X.n_rows,):
        raise ValueError(f"indicator length {tau.size} does not match {X.n_rows} rows")
    values, ablated = _noise(X.values, tau[None, :], lower, _as_generator(rng))
    out_domain = Domain.BINARY if X.domain is Domain.BINARY and not isinstance(lower, Gaussian) \
        else Domain.REAL
    return ExtendedMatrix(FeatureMatrix(values[0], out_domain), tau,
                          None if ablated is None else ablated[0])


def draw_batch(X: FeatureMatrix, config: SmoothingConfig, size: int,
               rng: RngLike) -> SampleBatch:
    config.check_domain(X.domain)
    gen = _as_generator(rng)
    tau = _draw_tau(size, X.n_rows, config.selection, gen)
    values, ablated = _noise(X.values, tau, config.lower, gen)
    domain = Domain.REAL if isinstance(config.lower, Gaussian) else X.domain
    return SampleBatch(values, tau, ablated, domain)


def _classify(classifier, batch: SampleBatch, offset: int) -> np.ndarray:
    batch_fn = getattr(classifier, "classify_batch", None)
    if batch_fn is not None:
        try:
            labels = np.asarray(batch_fn(batch), dtype=np.int64)
        except Exception as e:
            raise SamplingError(
                f"classifier failed on samples {offset}..{offset + len(batch) - 1}: {e}",
                offset) from e
    else:
        labels = np.empty(len(batch), dtype=np.int64)
        for i in range(len(batch)):
            try:
                labels[i] = int(classifier.classify(batch.extended(i)))
            except Exception as e:
                raise SamplingError(f"classifier failed on sample {offset + i}: {e}",
                                    offset + i) from e
    bad = (labels < 0) | (labels >= classifier.n_classes)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise SamplingError(f"classifier returned class {labels[i]} on sample {offset + i}, "
                            f"outside 0..{classifier.n_classes - 1}", offset + i)
    return np.bincount(labels, minlength=classifier.n_classes)


def sample_under_noise(classifier, X: FeatureMatrix, config: SmoothingConfig, n: int,
                       rng: RngStream, *, phase: int = 0, block_size: int = BLOCK_SIZE,
                       workers: Optional[int] = None) -> VoteCounts:
    """Count the base classifier's votes over ``n`` draws from the smoothing distribution.

    Draws are split into fixed blocks of ``block_size``; block ``b`` always uses
    substream ``(phase, b)``, so the result is the same for any worker count.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    config.check_domain(X.domain)
    starts = list(range(0, n, block_size))

    def run(b: int) -> np.ndarray:
        start = starts[b]
        batch = draw_batch(X, config, min(block_size, n - start), rng.generator(phase, b))
        return _classify(classifier, batch, start)

    workers = default_workers() if workers is None else workers
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(b) for b in range(len(starts))]
    counts = np.sum(parts, axis=0)
    return VoteCounts(tuple(int(c) for c in counts), n)
