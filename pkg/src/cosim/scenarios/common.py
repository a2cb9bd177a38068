"""Output helpers shared by the scenario runners."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MANIFEST = "manifest.json"


def write_rows(path: Path, header: Iterable[str], rows: Iterable[Iterable]) -> Path:
    """CSV with shortest round-trip float formatting (stable across runs)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_columns(path: Path, columns: dict[str, np.ndarray]) -> Path:
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    as_lists = [a.tolist() for a in arrays]
    return write_rows(path, names, zip(*as_lists))


def read_columns(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if not rows:
        return {h: np.array([]) for h in header}
    cols = list(zip(*rows))
    out = {}
    for h, col in zip(header, cols):
        try:
            out[h] = np.array([int(x) for x in col], dtype=np.int64)
        except ValueError:
            try:
                out[h] = np.array([float(x) for x in col], dtype=float)
            except ValueError:
                out[h] = np.array(col, dtype=str)
    return out


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict[str, str]:
    import pydantic

    from .. import __version__

    return {
        "cosim": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pydantic": pydantic.VERSION,
    }


@dataclass
class RunResult:
    outputs: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    synthetic: list[str] = field(default_factory=list)

    def add(self, path: Path) -> Path:
        self.outputs.append(path.name)
        return path


def write_manifest(out: Path, config: dict, result: RunResult, status: str = "ok", error: str | None = None,
                   extra: dict | None = None) -> Path:
    outputs = {}
    for name in sorted(set(result.outputs)):
        p = out / name
        if p.exists():
            outputs[name] = {"sha256": sha256(p), "bytes": p.stat().st_size}
    manifest = {
        "scenario": config.get("scenario"),
        "mode": config.get("mode"),
        "seed": config.get("seed"),
        "status": status,
        "config": config,
        "versions": versions(),
        "outputs": outputs,
        "summary": result.summary,
        "synthetic": result.synthetic,
    }
    if error is not None:
        manifest["error"] = error
    if extra:
        manifest.update(extra)
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def load_manifest(directory: Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{path} is missing; not a run directory")
    return json.loads(path.read_text())
