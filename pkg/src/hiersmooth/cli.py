"""Command-line entry point.

Settings come from three layers, highest precedence first: command-line
flags, a ``key = value`` config file given with ``--config``, built-in
defaults. Config keys are the long flag names with or without the leading
dashes (``p-plus`` and ``p_plus`` both work).

Exit codes: 0 success, 1 oracle check failed, 2 configuration error,
3 data error.
"""

from __future__ import annotations

import argparse
import configparser
import itertools
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .classifiers import UnknownClassifierError, make_classifier
from .core import (Ablation, ContinuousL2, DimensionError, DiscreteFlip, Domain, Gaussian,
                   PerRow, SmoothingConfig, SparseFlip, Uniform, read_dataset, write_dataset)
from .harness import CertifyParams, SyntheticSpec, evaluate_dataset, make_synthetic_dataset
from .oracle import OracleGrid, run_oracle_suite, swap_region_masses
from .sweep import (Grid, Method, SweepSpec, UniformRandom, atomic_write, csv_text, fmt,
                    pareto_front, read_points, run_sweep_to_dir)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
SUMMARY_COLUMNS = ["sample_id", "predicted", "abstained", "p_lower", "delta", "radius_spec",
                   "certified"]
KNOWN_METHODS = [m.value for m in Method]


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# --- value parsing -----------------------------------------------------------------

def _float(key: str, s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {s!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: expected a finite number, got {s!r}")
    return v


def _int(key: str, s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {s!r}") from None


def _bool(key: str, s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {s!r}")


def inclusive_range(key: str, spec: str) -> list[float]:
    """``a`` or ``start:stop:step`` with both endpoints included."""
    parts = spec.split(":")
    if len(parts) == 1:
        return [_float(key, parts[0])]
    if len(parts) != 3:
        raise ConfigError(f"{key}: expected 'value' or 'start:stop:step', got {spec!r}")
    start, stop, step = (_float(key, p) for p in parts)
    if step <= 0:
        raise ConfigError(f"{key}: step must be positive")
    n = math.floor((stop - start) / step + 1e-9)
    return [round(start + i * step, 12) for i in range(n + 1)] if n >= 0 else []


def value_list(key: str, spec: str) -> list[float]:
    """Comma-separated values and inclusive ranges."""
    out: list[float] = []
    for item in spec.split(","):
        if item.strip():
            out += inclusive_range(key, item.strip())
    return out


def parse_threats(spec: str, lower: str):
    """``r=1:3:1,eps=0:1:0.25`` (l2) or ``r=1,ra=0:2:1,rd=1`` (flips), expanded as a product."""
    fields: dict[str, list[float]] = {}
    for part in spec.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"threats: expected key=value, got {part!r}")
        k, v = (s.strip() for s in part.split("=", 1))
        if k not in ("r", "eps", "ra", "rd"):
            raise ConfigError(f"threats: unknown key {k!r}")
        fields[k] = inclusive_range(f"threats.{k}", v)
    if "r" not in fields:
        raise ConfigError("threats: the row budget r is required")
    discrete = "ra" in fields or "rd" in fields
    if discrete and "eps" in fields:
        raise ConfigError("threats: eps cannot be combined with ra/rd")
    if lower == "gaussian" and discrete:
        raise ConfigError("threats: Gaussian smoothing certifies l2 threats (use eps)")
    if lower == "sparse" and not discrete:
        raise ConfigError("threats: sparse flip smoothing certifies flip threats (use ra/rd)")

    def ints(name):
        vals = fields.get(name, [0.0])
        if any(v != int(v) or v < 0 for v in vals):
            raise ConfigError(f"threats: {name} must be non-negative integers")
        return [int(v) for v in vals]

    if discrete:
        grid = [DiscreteFlip(r, a, d) for r, a, d in
                itertools.product(ints("r"), ints("ra"), ints("rd"))]
    else:
        eps = fields.get("eps", [0.0])
        if any(e < 0 for e in eps):
            raise ConfigError("threats: eps must be non-negative")
        grid = [ContinuousL2(r, e) for r, e in itertools.product(ints("r"), eps)]
    if not grid:
        raise ConfigError(f"threats: empty range in {spec!r}")
    return grid


# --- settings resolution -------------------------------------------------------------

COMMON = {"seed": "0", "workers": None, "config": None}
SMOOTHING = {"p": "0.8", "ps": None, "lower": "gaussian", "sigma": "0.5", "p-plus": "0.01",
             "p-minus": "0.6"}
CERTIFY = {"n0": "1000", "n1": "10000", "alpha": "0.01", "mode": "binary",
           "classifier": "centroid-indicator", "threshold": "0.5", "label": "0",
           "dataset": None, "train-dataset": None, "out": None, "threats": None}

DEFAULTS = {
    "certify": {**COMMON, **SMOOTHING, **CERTIFY},
    "sweep": {**COMMON, **CERTIFY,
              "methods": "hierarchical", "lower": "gaussian", "p": "0.5:1:0.25",
              "sigma": "0.25,0.5", "p-plus": "0.01", "p-minus": "0.6",
              "include-ablation": "false", "random": "0", "random-seed": "0",
              "p-range": "0.51:0.993", "sigma-range": "0.1:1.0", "p-plus-range": "0:0.05",
              "p-minus-range": "0.5:1", "repeats": "1"},
    "oracle-check": {"tolerance": "1e-9", "region-tolerance": "1e-12", "inject-fault": "false",
                     "pairs": "3", "seed": "0", "config": None},
    "plotdata": {"input": None, "out": None, "config": None},
    "make-dataset": {"out": None, "n-samples": "100", "rows": "4", "cols": "3",
                     "domain": "real", "separation": "1.0", "corruption": "0.1",
                     "classes": "2", "seed": "0", "config": None},
}

# never part of the resolved config, so outputs do not depend on them
NOT_RECORDED = {"workers", "config", "out"}


def _read_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        parser.read_string("[run]\n" + p.read_text(encoding="utf-8"), source=str(p))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {str(e).splitlines()[0]}") from None
    return {k.lstrip("-").replace("_", "-"): v for k, v in parser["run"].items()}


def resolve(command: str, args: argparse.Namespace) -> dict:
    defaults = DEFAULTS[command]
    settings = dict(defaults)
    if getattr(args, "config", None):
        for k, v in _read_config_file(args.config).items():
            if k not in defaults:
                raise ConfigError(f"{args.config}: unknown key {k!r} for {command}")
            settings[k] = v
    for k in defaults:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            settings[k] = v
    return settings


def _require(settings: dict, *keys: str) -> None:
    for k in keys:
        if not settings.get(k):
            raise ConfigError(f"missing required setting --{k}")


def _workers(settings: dict) -> Optional[int]:
    if settings.get("workers") is None:
        return None
    w = _int("workers", settings["workers"])
    if w < 1:
        raise ConfigError("workers must be at least 1")
    return w


def _lower(settings: dict):
    name = settings["lower"]
    try:
        if name == "gaussian":
            return Gaussian(_float("sigma", settings["sigma"]))
        if name == "sparse":
            return SparseFlip(_float("p-plus", settings["p-plus"]),
                              _float("p-minus", settings["p-minus"]))
        if name == "ablation":
            return Ablation()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    raise ConfigError(f"lower: expected gaussian, sparse or ablation, got {name!r}")


def _selection(settings: dict):
    try:
        if settings.get("ps"):
            return PerRow(tuple(_float("ps", s) for s in settings["ps"].split(",")))
        return Uniform(_float("p", settings["p"]))
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _params(settings: dict) -> CertifyParams:
    try:
        return CertifyParams(_int("n0", settings["n0"]), _int("n1", settings["n1"]),
                             _float("alpha", settings["alpha"]), settings["mode"])
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _load(path: str, what: str):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {path}")
    try:
        records = read_dataset(p)
    except (ValueError, OSError) as e:
        raise DataError(f"{path}: {e}") from None
    if not records:
        raise DataError(f"{path}: dataset is empty")
    return records


def _classifier(settings: dict, train, config: SmoothingConfig, seed: int):
    name = settings["classifier"]
    n_classes = max(2, max(r.label for r in train) + 1)
    try:
        if name.startswith("centroid"):
            clf = make_classifier(name, n_classes=n_classes)
            return clf.fit(train, config, seed=seed)
        if name == "threshold":
            return make_classifier(name, threshold=_float("threshold", settings["threshold"]))
        if name == "constant":
            return make_classifier(name, label=_int("label", settings["label"]), n_classes=n_classes)
        if name == "coin":
            raise ConfigError("the coin classifier needs a reference matrix; use it from Python")
        return make_classifier(name)
    except UnknownClassifierError as e:
        raise ConfigError(e.args[0]) from None
    except DimensionError as e:
        raise DataError(str(e)) from None
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _rule_options(settings: dict) -> tuple:
    name = settings["classifier"]
    if name == "threshold":
        return (("threshold", _float("threshold", settings["threshold"])),)
    if name == "constant":
        return (("label", _int("label", settings["label"])),)
    return ()


def _write_provenance(out: Path, command: str, settings: dict) -> None:
    lines = [f"# hiersmooth {__version__}", f"command = {command}", f"version = {__version__}"]
    lines += [f"{k} = {v}" for k, v in sorted(settings.items())
              if k not in NOT_RECORDED and v is not None]
    atomic_write(out / "resolved_config.txt", "\n".join(lines) + "\n")


def _check_domain(records, config: SmoothingConfig) -> None:
    domains = {r.matrix.domain for r in records}
    shapes = {r.matrix.shape for r in records}
    if len(domains) > 1 or len(shapes) > 1:
        raise DataError("dataset mixes matrix shapes or domains")
    try:
        config.check_domain(domains.pop())
        config.selection.probs(shapes.pop()[0])
    except DimensionError as e:
        raise DataError(str(e)) from None


# --- commands ----------------------------------------------------------------------

def cmd_certify(args) -> int:
    s = resolve("certify", args)
    _require(s, "dataset", "out", "threats")
    config = SmoothingConfig(_selection(s), _lower(s))
    threats = parse_threats(s["threats"], s["lower"])
    params = _params(s)
    seed = _int("seed", s["seed"])
    workers = _workers(s)

    data = _load(s["dataset"], "dataset")
    train = _load(s["train-dataset"], "training dataset") if s.get("train-dataset") else data
    _check_domain(data, config)
    _check_domain(train, config)
    for t in threats:
        if t.r > data[0].matrix.n_rows:
            raise ConfigError(f"threat {t.label()} exceeds the {data[0].matrix.n_rows} rows")
    clf = _classifier(s, train, config, seed)
    ev = evaluate_dataset(clf, data, config, threats, params, seed=seed, workers=workers)

    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "records.jsonl",
                 "".join(json.dumps(r.to_json(), separators=(",", ":")) + "\n" for r in ev.records))
    rows = [[r.sample_id, str(r.predicted), str(int(r.abstained)), fmt(r.p_lower), fmt(v.delta),
             v.threat.label(), str(int(v.certified))]
            for r in ev.records for v in r.verdicts]
    atomic_write(out / "summary.csv", csv_text(SUMMARY_COLUMNS, rows))
    _write_provenance(out, "certify", s)
    print(f"clean accuracy {fmt(ev.clean_accuracy)}")
    for t, a in zip(ev.threats, ev.certified_accuracy):
        print(f"certified accuracy at {t.label()}: {fmt(a)}")
    return EXIT_OK


def _pair_range(key: str, spec: str) -> tuple[float, float]:
    parts = spec.split(":")
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected 'low:high', got {spec!r}")
    lo, hi = (_float(key, x) for x in parts)
    if lo > hi:
        raise ConfigError(f"{key}: empty range {spec!r}")
    return lo, hi


def cmd_sweep(args) -> int:
    s = resolve("sweep", args)
    _require(s, "dataset", "out", "threats")
    if s["lower"] not in ("gaussian", "sparse"):
        raise ConfigError("sweep: lower must be gaussian or sparse")
    methods = [m.strip() for m in s["methods"].split(",") if m.strip()]
    for m in methods:
        if m not in KNOWN_METHODS:
            raise ConfigError(f"methods: unknown method {m!r}; choose from {', '.join(KNOWN_METHODS)}")
    threats = parse_threats(s["threats"], s["lower"])
    n_random = _int("random", s["random"])
    if n_random < 0:
        raise ConfigError("random: number of trials must be non-negative")
    if n_random:
        sampling = UniformRandom(n_random, _int("random-seed", s["random-seed"]),
                                 _pair_range("p-range", s["p-range"]),
                                 _pair_range("sigma-range", s["sigma-range"]),
                                 _pair_range("p-plus-range", s["p-plus-range"]),
                                 _pair_range("p-minus-range", s["p-minus-range"]))
    else:
        sampling = Grid()
    p_values = value_list("p", s["p"])
    sigmas = value_list("sigma", s["sigma"])
    flips = list(itertools.product(value_list("p-plus", s["p-plus"]),
                                   value_list("p-minus", s["p-minus"])))
    if not n_random:
        needs_p = {"hierarchical", "ablation-only"} & set(methods)
        needs_lower = {"hierarchical", "lower-only"} & set(methods)
        if not methods or (needs_p and not p_values) or \
                (needs_lower and not (sigmas if s["lower"] == "gaussian" else flips)):
            raise ConfigError("sweep: empty parameter range")

    data = _load(s["dataset"], "dataset")
    train = _load(s["train-dataset"], "training dataset") if s.get("train-dataset") else None
    try:
        spec = SweepSpec(dataset=data, threats=threats, methods=methods, lower=s["lower"],
                         p_values=p_values, sigmas=sigmas, flips=flips,
                         include_ablation=_bool("include-ablation", s["include-ablation"]),
                         sampling=sampling, classifier=s["classifier"],
                         classifier_options=_rule_options(s), train=train,
                         params=_params(s), seed=_int("seed", s["seed"]),
                         repeats=_int("repeats", s["repeats"]))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    probe = SmoothingConfig(Uniform(1.0), Gaussian(1.0) if s["lower"] == "gaussian"
                            else SparseFlip(0.0, 0.0))
    _check_domain(data, probe)
    if train is not None:
        _check_domain(train, probe)
    if s["classifier"] == "coin":
        raise ConfigError("the coin classifier needs a reference matrix; use it from Python")
    try:
        make_classifier(s["classifier"], **dict(_rule_options(s)))
    except UnknownClassifierError as e:
        raise ConfigError(e.args[0]) from None
    except ValueError as e:
        raise ConfigError(str(e)) from None

    out = Path(s["out"])
    points = run_sweep_to_dir(spec, out, workers=_workers(s))
    _write_provenance(out, "sweep", s)
    print(f"{len(points)} points, {sum(not p.dominated for p in points)} on the fronts")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    s = resolve("oracle-check", args)
    tol = _float("tolerance", s["tolerance"])
    rtol = _float("region-tolerance", s["region-tolerance"])
    if tol < 0 or rtol < 0:
        raise ConfigError("tolerances must be non-negative")
    pairs = _int("pairs", s["pairs"])
    if pairs < 1:
        raise ConfigError("pairs must be at least 1")
    grid = OracleGrid(pairs_per_set=pairs, seed=_int("seed", s["seed"]))
    corrupt = swap_region_masses if _bool("inject-fault", s["inject-fault"]) else None
    report = run_oracle_suite(grid, tol, rtol, corrupt=corrupt)
    print(report.table())
    print("all identities hold" if report.passed else "oracle check FAILED")
    return EXIT_OK if report.passed else EXIT_FAILED


SERIES_COLUMNS = ["radius_spec", "clean_acc", "cert_acc", "trial_id"]


def _series_rows(points) -> list[list[str]]:
    return [[p.radius_spec, fmt(p.clean_accuracy), fmt(p.certified_accuracy), p.trial_id]
            for p in points]


def _front_polyline(points) -> list:
    """Per radius (in order of first appearance), the front sorted by clean accuracy."""
    radii = list(dict.fromkeys(p.radius_spec for p in points))
    out = []
    for r in radii:
        front = pareto_front([p for p in points if p.radius_spec == r])
        out += sorted(front, key=lambda p: (p.clean_accuracy, p.certified_accuracy))
    return out


def cmd_plotdata(args) -> int:
    s = resolve("plotdata", args)
    _require(s, "input", "out")
    src = Path(s["input"])
    if not src.is_file():
        raise DataError(f"sweep results not found: {src}")
    try:
        points = read_points(src)
    except ValueError as e:
        raise DataError(str(e)) from None
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    methods = list(dict.fromkeys(KNOWN_METHODS + [p.method for p in points]))
    for m in methods:
        mine = [p for p in points if p.method == m]
        atomic_write(out / f"scatter_{m}.csv", csv_text(SERIES_COLUMNS, _series_rows(mine)))
        atomic_write(out / f"front_{m}.csv",
                     csv_text(SERIES_COLUMNS, _series_rows(_front_polyline(mine))))
    front = _front_polyline(points)
    atomic_write(out / "front_all.csv", csv_text(["method"] + SERIES_COLUMNS,
                 [[p.method] + row for p, row in zip(front, _series_rows(front))]))
    _write_provenance(out, "plotdata", s)
    print(f"{len(points)} points in {len(methods)} method series")
    return EXIT_OK


def cmd_make_dataset(args) -> int:
    s = resolve("make-dataset", args)
    _require(s, "out")
    try:
        spec = SyntheticSpec(_int("n-samples", s["n-samples"]), _int("rows", s["rows"]),
                             _int("cols", s["cols"]), Domain(s["domain"]),
                             _float("separation", s["separation"]), _int("seed", s["seed"]),
                             _int("classes", s["classes"]), _float("corruption", s["corruption"]))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    path = Path(s["out"])
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, make_synthetic_dataset(spec))
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def _add(p: argparse.ArgumentParser, *names: str, flag: bool = False, help: str = "") -> None:
    for name in names:
        if flag:
            p.add_argument(f"--{name}", action="store_const", const="true", default=None,
                           help=help)
        else:
            p.add_argument(f"--{name}", default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiersmooth",
                                     description="Certificates for hierarchical randomized smoothing.")
    parser.add_argument("--version", action="version", version=f"hiersmooth {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("certify", help="certify every sample of a dataset")
    _add(c, "config", help="key = value settings file (flags take precedence)")
    _add(c, "dataset", "train-dataset", "out", "threats", "p", "ps", "lower", "sigma", "p-plus",
         "p-minus", "n0", "n1", "alpha", "mode", "classifier", "threshold", "label", "seed",
         "workers")

    w = sub.add_parser("sweep", help="sweep smoothing parameters and extract Pareto fronts")
    _add(w, "config", help="key = value settings file (flags take precedence)")
    _add(w, "dataset", "train-dataset", "out", "threats", "methods", "lower", "p", "sigma",
         "p-plus", "p-minus", "random", "random-seed", "p-range", "sigma-range", "p-plus-range",
         "p-minus-range", "n0", "n1", "alpha", "mode", "classifier", "threshold", "label",
         "seed", "repeats", "workers")
    _add(w, "include-ablation", flag=True, help="add ablation lower-level trials")

    o = sub.add_parser("oracle-check", help="compare certificates with exhaustive enumeration")
    _add(o, "config", "tolerance", "region-tolerance", "pairs", "seed")
    _add(o, "inject-fault", flag=True, help="corrupt every region table (must fail)")

    d = sub.add_parser("plotdata", help="turn sweep results into plot-ready series")
    _add(d, "config", "input", "out")

    m = sub.add_parser("make-dataset", help="write a synthetic dataset")
    _add(m, "config", "out", "n-samples", "rows", "cols", "domain", "separation", "corruption",
         "classes", "seed")
    return parser


COMMANDS = {"certify": cmd_certify, "sweep": cmd_sweep, "oracle-check": cmd_oracle_check,
            "plotdata": cmd_plotdata, "make-dataset": cmd_make_dataset}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"hiersmooth: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"hiersmooth: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
