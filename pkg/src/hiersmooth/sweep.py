"""Parameter sweeps over smoothing configurations and Pareto-front extraction.

Every trial evaluates one smoothing configuration on the same dataset with
the same seeds; only the configuration differs between trials. That makes
the baselines exact special cases of the hierarchical sweep: a hierarchical
trial with ``p = 1`` and a lower-only trial with the same noise level run
identical computations.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .classifiers import make_classifier
from .core import (Ablation, DatasetRecord, Gaussian, LowerLevel, SmoothingConfig, SparseFlip,
                   ThreatModel, Uniform)
from .harness import CertifyParams, evaluate_dataset
from .sampling import default_workers

TRIAL_COLUMNS = ["trial_id", "method", "p", "lower", "sigma", "p_plus", "p_minus",
                 "radius_spec", "clean_acc", "cert_acc"]


class Method(str, Enum):
    HIERARCHICAL = "hierarchical"
    LOWER_ONLY = "lower-only"
    ABLATION_ONLY = "ablation-only"


def fmt(x: float) -> str:
    """12 significant digits, plain decimal point, no grouping."""
    return format(float(x), ".12g")


@dataclass(frozen=True)
class Grid:
    pass


@dataclass(frozen=True)
class UniformRandom:
    n_trials: int
    seed: int = 0
    p_range: tuple = (0.51, 0.993)
    sigma_range: tuple = (0.1, 1.0)
    p_plus_range: tuple = (0.0, 0.05)
    p_minus_range: tuple = (0.5, 1.0)


@dataclass(frozen=True)
class SweepSpec:
    dataset: Sequence[DatasetRecord]
    threats: Sequence[ThreatModel]
    methods: Sequence[Method] = (Method.HIERARCHICAL,)
    lower: str = "gaussian"                     # lower level of the non-ablation trials
    p_values: Sequence[float] = ()
    sigmas: Sequence[float] = ()
    flips: Sequence[tuple] = ()
    include_ablation: bool = False              # hierarchical trials also with the ablation lower level
    sampling: Union[Grid, UniformRandom] = Grid()
    classifier: str = "centroid-indicator"
    classifier_options: tuple = ()              # (name, value) pairs for rule classifiers
    train: Optional[Sequence[DatasetRecord]] = None
    params: CertifyParams = CertifyParams()
    seed: int = 0
    repeats: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        if self.lower not in ("gaussian", "sparse"):
            raise ValueError(f"lower must be 'gaussian' or 'sparse', got {self.lower!r}")
        for p in self.p_values:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"selection probability {p} outside [0, 1]")
        for s in self.sigmas:
            if not s > 0:
                raise ValueError(f"sigma {s} must be positive")
        for pp, pm in self.flips:
            if not (0.0 <= pp <= 1.0 and 0.0 <= pm <= 1.0):
                raise ValueError(f"flip probabilities ({pp}, {pm}) outside [0, 1]")
        if self.repeats < 1:
            raise ValueError("repeats must be positive")
        if not self.threats:
            raise ValueError("empty threat grid")


@dataclass(frozen=True)
class Trial:
    trial_id: str
    method: Method
    config: SmoothingConfig

    def param_cells(self) -> list[str]:
        c = self.config
        lower = c.lower
        cells = [fmt(c.selection.p)]
        if isinstance(lower, Gaussian):
            cells += ["gaussian", fmt(lower.sigma), "", ""]
        elif isinstance(lower, SparseFlip):
            cells += ["sparse", "", fmt(lower.p_plus), fmt(lower.p_minus)]
        else:
            cells += ["ablation", "", "", ""]
        return cells


@dataclass(frozen=True)
class ParetoPoint:
    trial_id: str
    method: str
    params: dict
    radius_spec: str
    clean_accuracy: float
    certified_accuracy: float
    dominated: bool = False


def _lowers(spec: SweepSpec, rng: Optional[np.random.Generator], n: int) -> list[LowerLevel]:
    if rng is None:
        if spec.lower == "gaussian":
            return [Gaussian(s) for s in spec.sigmas]
        return [SparseFlip(pp, pm) for pp, pm in spec.flips]
    s = spec.sampling
    if spec.lower == "gaussian":
        return [Gaussian(float(v)) for v in rng.uniform(*s.sigma_range, size=n)]
    pp = rng.uniform(*s.p_plus_range, size=n)
    pm = rng.uniform(*s.p_minus_range, size=n)
    return [SparseFlip(float(a), float(b)) for a, b in zip(pp, pm)]


def build_trials(spec: SweepSpec) -> list[Trial]:
    """Expand the spec into trials, in canonical order."""
    trials: list[Trial] = []
    for mi, method in enumerate(spec.methods):
        configs: list[SmoothingConfig] = []
        if isinstance(spec.sampling, UniformRandom):
            n = spec.sampling.n_trials
            rng = np.random.default_rng([spec.sampling.seed, mi])
            ps = [float(v) for v in rng.uniform(*spec.sampling.p_range, size=n)]
            if method is Method.HIERARCHICAL:
                for p, lower in zip(ps, _lowers(spec, rng, n)):
                    configs.append(SmoothingConfig(Uniform(p), lower))
                if spec.include_ablation:
                    configs += [SmoothingConfig(Uniform(p), Ablation()) for p in ps]
            elif method is Method.LOWER_ONLY:
                configs = [SmoothingConfig(Uniform(1.0), lo) for lo in _lowers(spec, rng, n)]
            else:
                configs = [SmoothingConfig(Uniform(p), Ablation()) for p in ps]
        else:
            if method is Method.HIERARCHICAL:
                configs = [SmoothingConfig(Uniform(p), lo)
                           for p in spec.p_values for lo in _lowers(spec, None, 0)]
                if spec.include_ablation:
                    configs += [SmoothingConfig(Uniform(p), Ablation()) for p in spec.p_values]
            elif method is Method.LOWER_ONLY:
                configs = [SmoothingConfig(Uniform(1.0), lo) for lo in _lowers(spec, None, 0)]
            else:
                configs = [SmoothingConfig(Uniform(p), Ablation()) for p in spec.p_values]
        trials += [Trial(f"{method.value}-{i:04d}", method, c) for i, c in enumerate(configs)]
    return trials


def _eval_seed(spec: SweepSpec, repeat: int) -> int:
    return int(np.random.SeedSequence([spec.seed, repeat]).generate_state(1, np.uint64)[0])


def run_trial(spec: SweepSpec, trial: Trial) -> list[tuple[float, float]]:
    """(clean, certified) accuracy per threat, averaged over repeats.

    Seeds depend on the spec seed and the repeat index only, never on the trial.
    """
    train = spec.train if spec.train is not None else spec.dataset
    n_classes = max(r.label for r in list(spec.dataset) + list(train)) + 1
    clean = 0.0
    cert = np.zeros(len(spec.threats))
    for k in range(spec.repeats):
        seed = _eval_seed(spec, k)
        if spec.classifier.startswith("centroid"):
            clf = make_classifier(spec.classifier, n_classes=max(n_classes, 2))
            clf.fit(train, trial.config, seed=seed)
        else:
            clf = make_classifier(spec.classifier, **dict(spec.classifier_options))
        ev = evaluate_dataset(clf, spec.dataset, trial.config, spec.threats, spec.params,
                              seed=seed, workers=1)
        clean += ev.clean_accuracy
        cert += np.asarray(ev.certified_accuracy)
    return [(clean / spec.repeats, c / spec.repeats) for c in cert]


def _rows_for(spec: SweepSpec, trial: Trial, accs) -> list[list[str]]:
    return [[trial.trial_id, trial.method.value, *trial.param_cells(), t.label(), fmt(c), fmt(a)]
            for t, (c, a) in zip(spec.threats, accs)]


def _points(rows: Sequence[Sequence[str]]) -> list[ParetoPoint]:
    out = []
    for row in rows:
        rec = dict(zip(TRIAL_COLUMNS, row))
        params = {k: rec[k] for k in ("p", "lower", "sigma", "p_plus", "p_minus")}
        out.append(ParetoPoint(rec["trial_id"], rec["method"], params, rec["radius_spec"],
                               float(rec["clean_acc"]), float(rec["cert_acc"])))
    return out


def _dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    return (a.clean_accuracy >= b.clean_accuracy and a.certified_accuracy >= b.certified_accuracy
            and (a.clean_accuracy > b.clean_accuracy or a.certified_accuracy > b.certified_accuracy))


def mark_dominated(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Flag every point some other point of the same set dominates; ties stay undominated."""
    return [replace(p, dominated=any(_dominates(q, p) for q in points)) for p in points]


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated points, by clean accuracy descending (stable)."""
    front = [p for p in mark_dominated(points) if not p.dominated]
    return sorted(front, key=lambda p: -p.clean_accuracy)


def weakly_dominates(front_a: Sequence[ParetoPoint], front_b: Sequence[ParetoPoint]) -> bool:
    """Every point of ``front_b`` is matched or beaten in both coordinates by some point of ``front_a``."""
    return all(any(a.clean_accuracy >= b.clean_accuracy and
                   a.certified_accuracy >= b.certified_accuracy for a in front_a)
               for b in front_b)


def mark_by_group(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Dominance within each (method, radius) group, original order preserved."""
    groups: dict = {}
    for i, p in enumerate(points):
        groups.setdefault((p.method, p.radius_spec), []).append(i)
    out = list(points)
    for idx in groups.values():
        for i, q in zip(idx, mark_dominated([points[i] for i in idx])):
            out[i] = q
    return out


def run_sweep(spec: SweepSpec, workers: Optional[int] = None) -> list[ParetoPoint]:
    """Evaluate every trial; one point per (trial, threat), dominance marked per method."""
    rows = _run_rows(spec, build_trials(spec), {}, workers, None)
    return mark_by_group(_points(rows))


def _run_rows(spec: SweepSpec, trials: Sequence[Trial], done: dict, workers: Optional[int],
              sink) -> list[list[str]]:
    todo = [t for t in trials if t.trial_id not in done]
    workers = default_workers() if workers is None else workers
    results = dict(done)

    def finish(trial: Trial, accs) -> None:
        rows = _rows_for(spec, trial, accs)
        results[trial.trial_id] = rows
        if sink is not None:
            sink(rows)

    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_trial, spec, t): t for t in todo}
            for fut in as_completed(futures):
                finish(futures[fut], fut.result())
    else:
        for t in todo:
            finish(t, run_trial(spec, t))
    return [row for t in trials for row in results[t.trial_id]]


# --- files ---------------------------------------------------------------------

def atomic_write(path: Union[str, Path], text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8", newline="")
    os.replace(tmp, path)


def csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_partial(path: Path, trials: Sequence[Trial], n_threats: int) -> dict:
    """Completed trials from an interrupted run; torn or incomplete trials are dropped."""
    if not path.exists():
        return {}
    text = path.read_text(encoding="utf-8")
    if text and not text.endswith("\n"):
        text = text[: text.rfind("\n") + 1]
    rows = list(csv.reader(io.StringIO(text)))
    if rows and rows[0] == TRIAL_COLUMNS:
        rows = rows[1:]
    known = {t.trial_id for t in trials}
    by_trial: dict = {}
    for row in rows:
        if len(row) == len(TRIAL_COLUMNS) and row[0] in known:
            by_trial.setdefault(row[0], []).append(row)
    return {k: v for k, v in by_trial.items() if len(v) == n_threats}


def run_sweep_to_dir(spec: SweepSpec, out_dir: Union[str, Path],
                     workers: Optional[int] = None) -> list[ParetoPoint]:
    """Run the sweep, streaming finished trials to ``trials.partial.csv``.

    A rerun into the same directory skips trials already recorded there.
    ``trials.csv`` and ``pareto.csv`` are written once, in canonical order,
    after all trials finish.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trials = build_trials(spec)
    partial = out / "trials.partial.csv"
    done = _read_partial(partial, trials, len(spec.threats))

    with open(partial, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIAL_COLUMNS)
        for rows in done.values():
            w.writerows(rows)
        fh.flush()

        def sink(rows):
            w.writerows(rows)
            fh.flush()

        rows = _run_rows(spec, trials, done, workers, sink)

    atomic_write(out / "trials.csv", csv_text(TRIAL_COLUMNS, rows))
    points = mark_by_group(_points(rows))
    pareto_rows = [r + [str(int(p.dominated))] for r, p in zip(rows, points)]
    atomic_write(out / "pareto.csv", csv_text(TRIAL_COLUMNS + ["dominated"], pareto_rows))
    partial.unlink()
    return points


def read_points(path: Union[str, Path]) -> list[ParetoPoint]:
    """Load points from a ``trials.csv`` or ``pareto.csv`` file."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    header, body = rows[0], rows[1:]
    missing = set(TRIAL_COLUMNS) - set(header)
    if missing:
        raise ValueError(f"{path}: missing columns {', '.join(sorted(missing))}")
    idx = [header.index(c) for c in TRIAL_COLUMNS]
    return _points([[r[i] for i in idx] for r in body if r])
