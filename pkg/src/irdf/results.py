"""Curve CSV schema, atomic file writes and run manifests."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .errors import ConfigurationError, DatasetFormatError
from .neird import LagrangianPoint

SCHEMA_VERSION = 1
COLUMNS = ("lambda", "D_hat", "R_hat_nats", "R_hat_bits", "F_hat", "seed", "epochs", "status", "source")
LN2 = math.log(2.0)


def atomic_write(path, payload: bytes | str) -> Path:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload.encode() if isinstance(payload, str) else payload)
    os.replace(tmp, path)
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def curve_rows(points: Iterable[LagrangianPoint], source: str = "neird") -> list[dict]:
    rows = []
    for p in points:
        rows.append({
            "lambda": p.lam, "D_hat": p.D_hat, "R_hat_nats": p.R_hat, "R_hat_bits": p.R_hat / LN2,
            "F_hat": p.F_hat, "seed": p.seed, "epochs": p.epochs, "status": p.status, "source": source,
        })
    return rows


def oracle_rows(D, R_nats, lams=None, name: str = "oracle") -> list[dict]:
    """Rows for a reference curve; ``F_hat`` is filled only where a slope is known."""
    D = np.asarray(D, dtype=np.float64)
    R = np.asarray(R_nats, dtype=np.float64)
    lams = np.full(D.shape, np.nan) if lams is None else np.asarray(lams, dtype=np.float64)
    rows = []
    for lam, d, r in zip(lams, D, R):
        rows.append({
            "lambda": lam, "D_hat": d, "R_hat_nats": r, "R_hat_bits": r / LN2,
            "F_hat": r + lam * d if math.isfinite(lam) else math.nan,
            "seed": None, "epochs": None, "status": "ok" if math.isfinite(r) else "infeasible",
            "source": f"oracle:{name}",
        })
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in COLUMNS])
    return buf.getvalue()


def write_curve_csv(path, rows: Sequence[dict]) -> Path:
    return atomic_write(path, rows_to_csv(rows))


def read_curve_csv(path) -> list[dict]:
    """Parse a curve CSV, checking the header against the current schema."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty curve file") from None
        if tuple(header) != COLUMNS:
            raise ConfigurationError(f"{path}: columns {header} do not match schema v{SCHEMA_VERSION} {list(COLUMNS)}")
        rows = []
        for rec in reader:
            row = dict(zip(COLUMNS, rec))
            for key in ("lambda", "D_hat", "R_hat_nats", "R_hat_bits", "F_hat"):
                row[key] = float(row[key]) if row[key] else math.nan
            for key in ("seed", "epochs"):
                row[key] = int(row[key]) if row[key] else None
            rows.append(row)
    return rows


def environment_info() -> dict:
    import scipy

    return {"irdf": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(path, manifest: dict) -> Path:
    return atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_manifest(path) -> dict:
    try:
        m = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: manifest is not valid JSON ({exc})") from None
    if m.get("format") != "irdf-manifest":
        raise DatasetFormatError(f"{path}: not an irdf manifest")
    return m


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")
