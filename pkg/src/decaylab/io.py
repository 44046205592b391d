"""CSV and manifest artifact writers shared by the experiment runner.

Every CSV gets a sibling manifest <name>.manifest.json recording the full
configuration echo, the seed, package versions, tolerances reached, and the
estimate family the experiment instantiates.  Numeric CSV formatting is fixed
at 17 significant digits so identical config + seed reruns are byte-identical.
"""

from __future__ import annotations

import json
import platform
import time
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION

CSV_FMT = "%.17g"


def write_csv(path, columns: dict) -> Path:
    """Write named columns (equal length) with a fixed numeric format."""
    path = Path(path)
    names = list(columns)
    arrays = [np.atleast_1d(np.asarray(columns[k])) for k in names]
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise ValueError("all CSV columns must have equal length")
    rows = np.column_stack([a.astype(float) for a in arrays])
    np.savetxt(path, rows, delimiter=",", header=",".join(names),
               comments="", fmt=CSV_FMT)
    return path


def write_manifest(path, *, estimate: str, config: dict, seed: int,
                   wall_time: float, tolerances: dict | None = None,
                   extra: dict | None = None) -> Path:
    path = Path(path)
    doc = {
        "format_version": FORMAT_VERSION,
        "estimate": estimate,
        "config": config,
        "seed": seed,
        "wall_time_s": round(wall_time, 3),
        "tolerances": tolerances or {},
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    try:
        import scipy
        doc["versions"]["scipy"] = scipy.__version__
    except Exception:
        pass
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    return doc


class Stopwatch:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        return False
