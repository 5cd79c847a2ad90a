"""File input/output: validated CSV reads, exact-float CSV/JSON writes and content hashes."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ValidationError

FLOAT_FORMAT = "%.17g"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def to_json(obj) -> str:
    """Deterministic JSON: sorted keys, shortest round-trip floats, non-finite values as null."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(to_json(obj))


def write_csv(path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_table(path, required=(), numeric=(), key=("unit_id", "year"), label="table"):
    """Read a CSV and collect every header, type and key problem before failing.

    ``unit_id`` is always read as a string so identifiers round-trip exactly.
    Raises ValidationError listing all problems.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError([f"{label}: cannot read {path}: no such file"])
    try:
        frame = pd.read_csv(path, dtype={"unit_id": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ValidationError([f"{label}: cannot parse {path}: {exc}"]) from None
    problems = []
    missing = [c for c in required if c not in frame.columns]
    if missing:
        problems.append(f"{label} {path}: missing column(s): {', '.join(missing)}")
    for col in numeric:
        if col not in frame.columns:
            continue
        conv = pd.to_numeric(frame[col], errors="coerce")
        bad = np.flatnonzero(conv.isna().to_numpy() & frame[col].notna().to_numpy())
        for i in bad[:10]:
            problems.append(f"{label} {path}: row {i + 2}: column {col} is not numeric ({frame[col].iloc[i]!r})")
        if bad.size > 10:
            problems.append(f"{label} {path}: {bad.size - 10} more non-numeric values in {col}")
        frame[col] = conv
    if key and all(k in frame.columns for k in key):
        dup = frame.duplicated(list(key))
        for i in np.flatnonzero(dup.to_numpy())[:10]:
            vals = ", ".join(str(frame[k].iloc[i]) for k in key)
            problems.append(f"{label} {path}: row {i + 2}: duplicate key ({vals})")
    if problems:
        raise ValidationError(problems)
    return frame
