"""Deterministic CSV output and the content-hashed run manifest."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np

CSV_VERSION = 1

RESULT_COLUMNS = (
    "sample_id", "defense", "defense_param", "q1", "precision", "recall", "rouge_l",
    "distance", "attack_seconds", "defense_seconds", "error",
)


def fmt(value) -> str:
    """Render a cell; floats keep 17 significant digits so replays compare exactly."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        return f"{v:.17g}"
    return str(value)


def _cell(value) -> str:
    if isinstance(value, str):
        return '"' + value.replace('"', '""') + '"'
    return fmt(value)


def write_csv(path, columns, rows) -> Path:
    """Header plus rows; strings quoted, numbers bare. Written atomically."""
    lines = [",".join(_cell(c) for c in columns)]
    for row in rows:
        cells = [row.get(c) for c in columns] if isinstance(row, dict) else list(row)
        lines.append(",".join(_cell(c) for c in cells))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".part")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def read_csv(path) -> list:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def platform_fingerprint() -> dict:
    return {"python": sys.version.split()[0], "numpy": np.__version__,
            "machine": platform.machine(), "system": platform.system()}


def write_manifest(out_dir, resolved: dict, files_written, seeds: dict, timings: dict,
                   version: str) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "artifact_version": version,
        "csv_version": CSV_VERSION,
        "config": resolved,
        "platform": platform_fingerprint(),
        "seeds": seeds,
        "timings": timings,
        "files": {Path(p).name: sha256(p) for p in files_written},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set, frozenset)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
