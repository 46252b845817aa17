"""Command-line interface: ``topoid {generate,train,classify,recover,detect,evaluate}``.

Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .anomaly import calibrate_threshold, detect
from .dataset import Dataset, atomic_write, dumps_json, read_dataset, read_observations, write_dataset
from .errors import NumericalError, SchemaMismatch, ValidationError
from .evaluation import (
    anomaly_sweep,
    confusion,
    load_variant_sweep,
    missing_unit_sweep,
    pair_drop_sweep,
    roc_all,
    split_rates,
)
from .model import DaModel, fit
from .recovery import recover
from .simgen import generate_dataset, load_feeder, reference_feeder

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3
SWEEPS = ("roc", "confusion", "missing-units", "pairs", "anomaly", "load-variants")
# named sub-streams derived from --seed
STREAM_DATA, STREAM_VALIDATION = 0, 1


# ---- helpers -----------------------------------------------------------------------


def _feeder(spec: str):
    return reference_feeder() if spec == "reference" else load_feeder(spec)


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _metadata(command: str, args: argparse.Namespace, inputs=(), **extra) -> dict:
    """Run record written next to every output; deliberately free of timestamps."""
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command", "out")}
    return {
        "command": command,
        "parameters": params,
        "inputs": {Path(p).name: _file_hash(p) for p in inputs},
        "versions": {
            "topoid": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        **extra,
    }


def _write_meta(out: Path, meta: dict) -> None:
    atomic_write(out.with_name(out.name + ".meta.json"), dumps_json(meta))


def _load_model(path) -> DaModel:
    with open(path) as fh:
        text = fh.read()
    try:
        return DaModel.loads(text)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: not a valid model file ({exc!r})") from None


def _check_schema(model: DaModel, schema, path) -> None:
    if schema != model.schema:
        raise SchemaMismatch(f"{path}: predictor columns {list(schema.names)} differ from the model's "
                             f"{list(model.schema.names)}")


def _selection(model: DaModel, unit: str | None, indices: str | None) -> tuple[int, ...] | None:
    if unit and indices:
        raise ValidationError("--unit and --indices are mutually exclusive")
    if unit:
        idx = []
        for u in unit.split(","):
            if u not in model.schema.units:
                raise ValidationError(f"--unit: unknown metered unit {u!r}; known: {model.schema.units}")
            idx += model.schema.unit_indices(u)
        return tuple(sorted(set(idx)))
    if indices:
        try:
            idx = tuple(sorted({int(v) for v in indices.split(",")}))
        except ValueError:
            raise ValidationError(f"--indices: expected comma-separated integers, got {indices!r}") from None
        if any(not 0 <= i < model.n_predictors for i in idx):
            raise ValidationError(f"--indices: out of range for {model.n_predictors} predictors")
        return idx
    return None


def _parse_bounds(model: DaModel, specs) -> dict[int, tuple[float, float]]:
    out = {}
    for spec in specs or []:
        try:
            name, rng = spec.split("=")
            lo, hi = (float(v) for v in rng.split(":"))
        except ValueError:
            raise ValidationError(f"--bounds: expected NAME=MIN:MAX, got {spec!r}") from None
        if lo > hi:
            raise ValidationError(f"--bounds {name}: min > max")
        out[model.schema.index(name)] = (lo, hi)
    return out


def _cell(v):
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True)
    if isinstance(v, float):
        return repr(v)
    return v


def _rows_to_csv(rows: list[dict]) -> str:
    columns = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _emit(out: Path, rows: list[dict], fmt: str, document=None) -> None:
    if fmt == "csv":
        atomic_write(out, _rows_to_csv(rows))
    else:
        atomic_write(out, dumps_json(rows if document is None else document))


def _correlations(model, recovered, clean, idx) -> dict:
    out = {}
    for i in idx:
        a, b = recovered[:, i], clean[:, i]
        ok = a.std() > 0 and b.std() > 0
        out[model.schema.names[i]] = float(np.corrcoef(a, b)[0, 1]) if ok else None
    return out


# ---- subcommands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    feeder = _feeder(args.feeder)
    out = Path(args.out)
    train, test = generate_dataset(feeder, args.n, args.seed, args.split, args.noise, stream=STREAM_DATA)
    write_dataset(train, out / "train.csv", out / "train_clean.csv")
    write_dataset(test, out / "test.csv", out / "test_clean.csv")
    files = ["train.csv", "train_clean.csv", "test.csv", "test_clean.csv"]
    if args.validation:
        # a separate calibration pool for anomaly thresholds, drawn from its own stream
        a, b = generate_dataset(feeder, args.validation, args.seed, 0.5, args.noise, stream=STREAM_VALIDATION)
        val = Dataset(a.schema, np.vstack([a.values, b.values]), a.labels + b.labels,
                      np.vstack([a.clean, b.clean]), list(a.classes))
        write_dataset(val, out / "validation.csv")
        files.append("validation.csv")
    meta = _metadata("generate", args, feeder_hash=feeder.content_hash(), feeder_name=feeder.name,
                     topologies=[str(t) for t in train.classes], rows={"train": len(train), "test": len(test)},
                     outputs=files)
    atomic_write(out / "metadata.json", dumps_json(meta))
    print(f"wrote {len(train)} training and {len(test)} test rows over {len(train.classes)} topologies to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = read_dataset(args.data)
    model = fit(ds.values, ds.labels, ds.schema, args.shrinkage)
    out = Path(args.out)
    atomic_write(out, model.dumps())
    _write_meta(out, _metadata("train", args, [args.data]))
    print(f"trained {model.n_classes} classes on {len(ds)} rows x {model.n_predictors} predictors")
    return EXIT_OK


def cmd_classify(args) -> int:
    model = _load_model(args.model)
    schema, X, labels = read_observations(args.data)
    _check_schema(model, schema, args.data)
    bad = np.flatnonzero(np.isnan(X).any(axis=1))
    if bad.size:
        raise ValidationError(f"{args.data}: row {int(bad[0]) + 1} has missing entries; "
                              "use `topoid recover` to fill them first")
    post = model.posteriors(X)
    pred = post.argmax(axis=1)
    rows = []
    for r in range(X.shape[0]):
        row = {"row": r, "predicted": str(model.classes[pred[r]].label), "posterior": float(post[r, pred[r]])}
        if labels is not None:
            row["actual"] = str(labels[r])
        rows.append(row)
    out = Path(args.out)
    _emit(out, rows, args.format)
    extra = {}
    if labels is not None:
        actual = np.array([model.class_index(l) for l in labels])
        extra["accuracy"] = float(np.mean(pred == actual))
        print(f"accuracy {extra['accuracy']:.6f}")
    _write_meta(out, _metadata("classify", args, [args.model, args.data], **extra))
    return EXIT_OK


def cmd_recover(args) -> int:
    model = _load_model(args.model)
    schema, X, labels = read_observations(args.data)
    _check_schema(model, schema, args.data)
    idx = _selection(model, args.unit, args.indices)
    bounds = _parse_bounds(model, args.bounds)
    results = [recover(model, row, idx, bounds) for row in X]
    recovered = np.array([r.recovered_observation.values for r in results])
    out = Path(args.out)
    extra = {}
    if args.clean:
        cschema, clean, _ = read_observations(args.clean)
        _check_schema(model, cschema, args.clean)
        if clean.shape != X.shape:
            raise SchemaMismatch(f"{args.clean}: row count differs from {args.data}")
        used = sorted({i for r in results for i in r.missing_idx})
        extra["correlation"] = _correlations(model, recovered, clean, used)
    if args.format == "csv":
        rows = [dict(zip(model.schema.names, v.tolist())) | {"best_label": str(model.classes[r.best_class].label)}
                for v, r in zip(recovered, results)]
        _emit(out, rows, "csv")
    else:
        _emit(out, [], "json", {"records": [r.to_dict(model) for r in results], **extra})
    _write_meta(out, _metadata("recover", args, [p for p in (args.model, args.data, args.clean) if p], **extra))
    print(f"recovered {len(results)} rows")
    return EXIT_OK


def cmd_detect(args) -> int:
    model = _load_model(args.model)
    schema, X, _ = read_observations(args.data)
    _check_schema(model, schema, args.data)
    idx = _selection(model, args.unit, args.indices)
    if idx is None:
        raise ValidationError("detect needs --unit or --indices")
    inputs = [args.model, args.data]
    if args.threshold is not None:
        threshold = args.threshold
    else:
        if not args.validation:
            raise ValidationError("--calibrate needs --validation")
        vschema, V, _ = read_observations(args.validation)
        _check_schema(model, vschema, args.validation)
        threshold = calibrate_threshold(model, V, idx, args.calibrate)
        inputs.append(args.validation)
    verdicts = [detect(model, row, idx, threshold) for row in X]
    rows = [{"row": r} | v.to_dict() for r, v in enumerate(verdicts)]
    out = Path(args.out)
    _emit(out, rows, args.format)
    flagged = sum(v.is_anomalous for v in verdicts)
    _write_meta(out, _metadata("detect", args, inputs, threshold=threshold, flagged=flagged))
    print(f"threshold {threshold:.6g}: {flagged} of {len(verdicts)} observations flagged")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    inputs = []
    if args.sweep == "load-variants":
        feeder = _feeder(args.feeder)
        rows = load_variant_sweep(feeder, args.n, args.seed, args.shrinkage)
        _emit(out / "load-variants.{}".format(args.format), rows, args.format)
        atomic_write(out / "metadata.json", dumps_json(_metadata("evaluate", args, feeder_hash=feeder.content_hash())))
        return EXIT_OK

    if not args.model or not args.test:
        raise ValidationError(f"--sweep {args.sweep} needs --model and --test")
    model = _load_model(args.model)
    test = read_dataset(args.test, classes=model.labels)
    _check_schema(model, test.schema, args.test)
    inputs += [args.model, args.test]
    units = args.unit.split(",") if args.unit else None
    extra = {}

    if args.sweep == "confusion":
        cm = confusion(model, test)
        rates = split_rates(cm)
        document = cm.to_dict() | {"accuracy": cm.accuracy, "rates": rates.to_dict()}
        rows = [{"predicted": str(p)} | {str(a): int(c) for a, c in zip(cm.labels, cm.counts[i])}
                for i, p in enumerate(cm.labels)]
        extra["accuracy"] = cm.accuracy
        print(f"accuracy {cm.accuracy:.6f}  sc_misid {rates.average_sc:.6f}  pds_misid {rates.average_pds:.6f}")
    elif args.sweep == "roc":
        curves = roc_all(model, test)
        document = [{"class": str(c.class_label), "auc": c.auc, "fpr": c.fpr.tolist(), "tpr": c.tpr.tolist(),
                     "thresholds": [_json_float(t) for t in c.thresholds]} for c in curves]
        rows = [{"class": str(c.class_label), "auc": c.auc} for c in curves]
        extra["min_auc"] = min(c.auc for c in curves)
        print(f"minimum AUC {extra['min_auc']:.6f}")
    elif args.sweep in ("missing-units", "pairs"):
        if not args.train:
            raise ValidationError(f"--sweep {args.sweep} needs --train for the retrained baseline")
        train = read_dataset(args.train, classes=model.labels)
        _check_schema(model, train.schema, args.train)
        inputs.append(args.train)
        if args.sweep == "missing-units":
            rows = missing_unit_sweep(model, train, test, units)
        else:
            rows = pair_drop_sweep(train, test, units, model.shrinkage)
        document = rows
    else:  # anomaly
        validation = None
        threshold = args.threshold
        if threshold is None:
            if not args.validation:
                raise ValidationError("--sweep anomaly needs --threshold or --validation")
            validation = read_dataset(args.validation, classes=model.labels)
            _check_schema(model, validation.schema, args.validation)
            inputs.append(args.validation)
        rows = anomaly_sweep(model, test, units, args.scales, threshold, validation, args.calibrate)
        for r in rows:
            r["alpha_edges"] = [_json_float(e) for e in r["alpha_edges"]]
        document = rows

    name = args.sweep + "." + args.format
    _emit(out / name, rows, args.format, document)
    atomic_write(out / "metadata.json", dumps_json(_metadata("evaluate", args, inputs, report=name, **extra)))
    return EXIT_OK


def _json_float(v: float):
    # JSON has no infinity; keep it as a string sentinel
    return v if np.isfinite(v) else ("inf" if v > 0 else "-inf")


# ---- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topoid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"topoid {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate labeled train/test datasets")
    g.add_argument("--feeder", default="reference", help="feeder JSON path or 'reference'")
    g.add_argument("--n", type=int, default=1000, help="scenarios per topology")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", type=float, default=0.9, help="training fraction")
    g.add_argument("--noise", type=float, default=0.01, help="multiplicative noise std")
    g.add_argument("--validation", type=int, default=100,
                   help="scenarios per topology for the calibration set (0 to skip)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit the discriminant model")
    t.add_argument("--data", required=True)
    t.add_argument("--shrinkage", type=float, default=1e-3)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    def selection(sp):
        sp.add_argument("--unit", help="metered unit name(s), comma-separated, e.g. DER3")
        sp.add_argument("--indices", help="predictor indices, comma-separated")

    c = sub.add_parser("classify", help="classify complete observations")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--format", choices=("json", "csv"), default="csv")
    c.set_defaults(func=cmd_classify)

    r = sub.add_parser("recover", help="fill missing signals by bounded recovery")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    selection(r)
    r.add_argument("--bounds", action="append", metavar="NAME=MIN:MAX", help="override a signal's bounds")
    r.add_argument("--clean", help="reference values for a correlation report")
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=("json", "csv"), default="json")
    r.set_defaults(func=cmd_recover)

    d = sub.add_parser("detect", help="screen a suspect unit with the likelihood ratio")
    d.add_argument("--model", required=True)
    d.add_argument("--data", required=True)
    selection(d)
    thr = d.add_mutually_exclusive_group(required=True)
    thr.add_argument("--threshold", type=float)
    thr.add_argument("--calibrate", type=float, metavar="TARGET_FALSE_ALARM")
    d.add_argument("--validation", help="clean observations for --calibrate")
    d.add_argument("--out", required=True)
    d.add_argument("--format", choices=("json", "csv"), default="json")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("evaluate", help="run an evaluation sweep")
    e.add_argument("--sweep", choices=SWEEPS, required=True)
    e.add_argument("--model")
    e.add_argument("--test")
    e.add_argument("--train", help="training data (missing-units, pairs)")
    e.add_argument("--validation", help="clean calibration data (anomaly)")
    e.add_argument("--unit", help="restrict to these units, comma-separated")
    e.add_argument("--threshold", type=float, help="fixed alpha threshold (anomaly)")
    e.add_argument("--calibrate", type=float, default=0.05, help="target false alarm (anomaly)")
    e.add_argument("--scales", type=float, nargs="+", default=[0.9, 1.1], help="manipulation factors (anomaly)")
    e.add_argument("--feeder", default="reference", help="feeder for load-variants")
    e.add_argument("--n", type=int, default=200, help="scenarios per topology for load-variants")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--shrinkage", type=float, default=1e-3)
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--format", choices=("json", "csv"), default="json")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"topoid {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"topoid {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"topoid {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
