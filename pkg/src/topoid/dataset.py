"""Labeled observation tables and their delimited-text format."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaMismatch, ValidationError
from .model import PredictorSchema, TopologyLabel

LABEL_COLUMNS = ("label_config", "label_pd")


@dataclass
class Dataset:
    schema: PredictorSchema
    values: np.ndarray
    labels: list[TopologyLabel]
    clean: np.ndarray | None = None
    classes: list[TopologyLabel] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != self.schema.dimension:
            raise SchemaMismatch(f"values shape {self.values.shape} does not match schema")
        if len(self.labels) != self.values.shape[0]:
            raise ValidationError("one label per row required")
        if self.clean is not None and np.shape(self.clean) != self.values.shape:
            raise SchemaMismatch("clean observations must match the noisy ones in shape")
        if not self.classes:
            self.classes = sorted(set(self.labels))

    def __len__(self):
        return self.values.shape[0]

    @property
    def y(self) -> np.ndarray:
        index = {lab: k for k, lab in enumerate(self.classes)}
        return np.array([index[lab] for lab in self.labels], dtype=int)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        clean = None if self.clean is None else self.clean[rows]
        return Dataset(self.schema, self.values[rows], [self.labels[i] for i in rows], clean, list(self.classes))

    def select(self, keep) -> "Dataset":
        """Restrict to a subset of predictor columns."""
        keep = list(keep)
        schema = PredictorSchema(tuple(self.schema.names[i] for i in keep))
        clean = None if self.clean is None else self.clean[:, keep]
        return Dataset(schema, self.values[:, keep], list(self.labels), clean, list(self.classes))

    def with_values(self, values) -> "Dataset":
        return Dataset(self.schema, values, list(self.labels), self.clean, list(self.classes))


def _fmt(v: float) -> str:
    return "" if v != v else repr(float(v))


def dataset_to_csv(ds: Dataset, values: np.ndarray | None = None) -> str:
    values = ds.values if values is None else values
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(ds.schema.names) + list(LABEL_COLUMNS))
    for row, lab in zip(values, ds.labels):
        w.writerow([_fmt(v) for v in row] + [lab.switch_config, lab.pd_string])
    return buf.getvalue()


def dataset_from_csv(text: str, classes: list[TopologyLabel] | None = None) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError("dataset file is empty") from None
    if tuple(header[-2:]) != LABEL_COLUMNS:
        raise ValidationError(f"dataset header must end with {LABEL_COLUMNS}")
    schema = PredictorSchema(tuple(header[:-2]))
    rows, labels = [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise ValidationError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")
        try:
            rows.append([float(v) if v.strip() else np.nan for v in rec[:-2]])
        except ValueError:
            raise ValidationError(f"line {lineno}: non-numeric predictor value") from None
        labels.append(TopologyLabel.parse(rec[-2], rec[-1]))
    values = np.array(rows, dtype=float).reshape(len(rows), schema.dimension)
    return Dataset(schema, values, labels, classes=list(classes) if classes else [])


def atomic_write(path, text: str) -> None:
    """Write-temp-then-rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(ds: Dataset, path, clean_path=None) -> None:
    atomic_write(path, dataset_to_csv(ds))
    if clean_path is not None and ds.clean is not None:
        atomic_write(clean_path, dataset_to_csv(ds, ds.clean))


def read_dataset(path, clean_path=None, classes=None) -> Dataset:
    with open(path, newline="") as fh:
        ds = dataset_from_csv(fh.read(), classes)
    if clean_path is not None and os.path.exists(clean_path):
        with open(clean_path, newline="") as fh:
            clean = dataset_from_csv(fh.read())
        if clean.schema != ds.schema or clean.labels != ds.labels:
            raise SchemaMismatch(f"{clean_path} does not match {path}")
        ds.clean = clean.values
    return ds


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def read_observations(path) -> tuple[PredictorSchema, np.ndarray, list[TopologyLabel] | None]:
    """Read a predictor table whose label columns are optional."""
    with open(path, newline="") as fh:
        text = fh.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise ValidationError(f"{path}: file is empty")
    if tuple(header[-2:]) == LABEL_COLUMNS:
        ds = dataset_from_csv(text)
        return ds.schema, ds.values, ds.labels
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise ValidationError(f"{path} line {lineno}: expected {len(header)} fields, got {len(rec)}")
        try:
            rows.append([float(v) if v.strip() else np.nan for v in rec])
        except ValueError:
            raise ValidationError(f"{path} line {lineno}: non-numeric predictor value") from None
    return PredictorSchema(tuple(header)), np.array(rows, dtype=float).reshape(len(rows), len(header)), None
