"""Embedding CSV and model JSON persistence with atomic writes.

The formats are described byte-for-byte in FORMATS.md.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .conformal import CalibratedSet
from .training import ProjectionHead

FORMAT_VERSION = 1


class StorageError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    ids: tuple
    labels: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim != 2:
            raise StorageError("vectors must be a 2-D array")
        if len(self.ids) != len(v) or len(self.labels) != len(v):
            raise StorageError("ids, labels and vectors must have the same length")
        if not np.all(np.isfinite(v)):
            raise StorageError("vectors must be finite")
        ids = tuple(str(i) for i in self.ids)
        if len(set(ids)) != len(ids):
            raise StorageError("ids must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "vectors", v)

    @property
    def n(self):
        return self.vectors.shape[0]

    @property
    def d(self):
        return self.vectors.shape[1]


def fmt_float(x):
    """Shortest decimal text that parses back to the identical double."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def atomic_write_text(path, text):
    """Write ``text`` to a temporary file beside ``path`` and rename it into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def embeddings_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label"] + [f"z{j}" for j in range(table.d)])
    for i in range(table.n):
        w.writerow([table.ids[i], int(table.labels[i])] + [fmt_float(x) for x in table.vectors[i]])
    return buf.getvalue()


def write_embeddings(path, table):
    atomic_write_text(path, embeddings_csv(table))


def read_embeddings(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return parse_embeddings(fh)


def parse_embeddings(fh):
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise StorageError("line 1: empty file, expected header id,label,z0,...") from None
    d = len(header) - 2
    if d < 1 or header[:2] != ["id", "label"] or header[2:] != [f"z{j}" for j in range(d)]:
        raise StorageError(f"line 1: malformed header {header!r}, expected id,label,z0,...,z{{d-1}}")
    ids, labels, rows, seen = [], [], [], {}
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != d + 2:
            raise StorageError(f"line {line}: expected {d + 2} fields, got {len(row)}")
        rid = row[0]
        if rid in seen:
            raise StorageError(f"line {line}: duplicate id {rid!r} (first seen on line {seen[rid]})")
        seen[rid] = line
        try:
            lab = int(row[1])
        except ValueError:
            raise StorageError(f"line {line}: label {row[1]!r} is not an integer") from None
        try:
            vec = [float(x) for x in row[2:]]
        except ValueError:
            raise StorageError(f"line {line}: non-numeric coordinate in {row[2:]!r}") from None
        if not all(math.isfinite(x) for x in vec):
            raise StorageError(f"line {line}: non-finite coordinate")
        ids.append(rid)
        labels.append(lab)
        rows.append(vec)
    vectors = np.array(rows, dtype=float).reshape(len(rows), d)
    return EmbeddingTable(tuple(ids), np.array(labels, dtype=np.int64), vectors)


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelFile:
    params: object
    head: ProjectionHead = None
    alpha: float = 0.05
    q_hat: float = None
    n_cal: int = 0
    config_digest: str = ""
    seed: int = 0
    created_from: str = ""
    config: dict = None

    @property
    def kind(self):
        return self.params.kind

    @property
    def calibrated(self):
        return self.q_hat is not None

    def calibrated_set(self):
        if self.q_hat is None:
            raise StorageError("uncalibrated model: run calibrate first")
        return CalibratedSet(self.params, self.alpha, self.q_hat, max(self.n_cal, 1), self.created_from)


def _floats(a):
    return [float(x) for x in np.asarray(a, dtype=float).ravel()]


def _param_block(params):
    if isinstance(params, geo.SingleNorm):
        return {"A": [_floats(r) for r in params.A], "p": float(params.p)}
    if isinstance(params, geo.Generalized):
        return {"m": _floats(params.m), "p": _floats(params.p)}
    if isinstance(params, geo.FixedMahalanobis):
        return {"precision": [_floats(r) for r in params.precision]}
    if isinstance(params, geo.FixedL2):
        return {}
    raise StorageError(f"cannot store metric of type {type(params).__name__}")


def _enc(x):
    if x is None:
        return None
    x = float(x)
    return fmt_float(x) if not math.isfinite(x) else x


def _dec(x, name):
    if x is None:
        return None
    if isinstance(x, str):
        if x not in ("inf", "-inf", "nan"):
            raise StorageError(f"schema violation: {name} must be a number or 'inf'")
        return float(x)
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise StorageError(f"schema violation: {name} must be a number")
    return float(x)


def model_to_dict(model):
    p = model.params
    return {
        "format_version": FORMAT_VERSION,
        "kind": p.kind,
        "d": int(p.d),
        "params": _param_block(p),
        "head": None if model.head is None or model.head.is_identity else [_floats(r) for r in model.head.W],
        "alpha": float(model.alpha),
        "q_hat": _enc(model.q_hat),
        "n_cal": int(model.n_cal),
        "config_digest": model.config_digest,
        "seed": int(model.seed),
        "created_from": model.created_from,
        "config": model.config,
    }


def write_model(path, model):
    atomic_write_text(path, json.dumps(model_to_dict(model), indent=2) + "\n")


def _matrix(x, name, d):
    a = np.array(x, dtype=float)
    if a.shape != (d, d):
        raise StorageError(f"schema violation: {name} must be {d}x{d}")
    return a


def model_from_dict(obj):
    if not isinstance(obj, dict):
        raise StorageError("schema violation: top level must be an object")
    ver = obj.get("format_version")
    if ver != FORMAT_VERSION:
        raise StorageError(f"unsupported format_version {ver!r}; this build reads version {FORMAT_VERSION}")
    for key in ("kind", "d", "params", "alpha"):
        if key not in obj:
            raise StorageError(f"schema violation: missing key {key!r}")
    kind, d, blk = obj["kind"], obj["d"], obj["params"]
    if not isinstance(d, int) or d < 1:
        raise StorageError("schema violation: d must be a positive integer")
    try:
        if kind == "single":
            params = geo.SingleNorm(_matrix(blk["A"], "A", d), _dec(blk["p"], "p"))
        elif kind == "generalized":
            m, p = np.array(blk["m"], dtype=float), np.array(blk["p"], dtype=float)
            if m.shape != (d,) or p.shape != (d,):
                raise StorageError(f"schema violation: m and p must have length {d}")
            params = geo.Generalized(m, p)
        elif kind == "mahalanobis":
            params = geo.FixedMahalanobis(_matrix(blk["precision"], "precision", d))
        elif kind == "l2":
            params = geo.FixedL2(d)
        else:
            raise StorageError(f"schema violation: unknown metric kind {kind!r}")
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, StorageError):
            raise
        raise StorageError(f"schema violation in params: {e}") from None
    head = None if obj.get("head") is None else ProjectionHead(_matrix(obj["head"], "head", d))
    return ModelFile(params, head, _dec(obj["alpha"], "alpha"), _dec(obj.get("q_hat"), "q_hat"),
                     int(obj.get("n_cal", 0)), str(obj.get("config_digest", "")), int(obj.get("seed", 0)),
                     str(obj.get("created_from", "")), obj.get("config"))


def read_model(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as e:
        raise StorageError(f"{path}: not valid JSON ({e})") from None
    return model_from_dict(obj)
