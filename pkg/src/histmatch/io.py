"""Atomic file output and plain CSV/JSON helpers."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile

import numpy as np


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write_text(path, csv_text(header, rows))


def write_matrix_csv(path, X, names, extra=None):
    """Rows of ``X`` with column ``names``; ``extra`` maps column name to a vector."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    extra = extra or {}
    header = list(names) + list(extra)
    cols = [np.asarray(v) for v in extra.values()]
    rows = ([*x, *(c[i] for c in cols)] for i, x in enumerate(X))
    write_csv(path, header, rows)


class CSVParseError(ValueError):
    pass


def read_matrix_csv(path, expected_cols=None):
    """Numeric CSV with a header row; returns (names, array). Errors cite line numbers."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVParseError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CSVParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as err:
                raise CSVParseError(f"{path}:{lineno}: {err}") from None
    if expected_cols is not None and len(header) != expected_cols:
        raise CSVParseError(f"{path}: expected {expected_cols} columns, got {len(header)}")
    arr = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return [h.strip() for h in header], arr
