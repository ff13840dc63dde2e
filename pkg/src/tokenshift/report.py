"""JSON / CSV / NDJSON emitters with a metadata header on every file.

Floats are written with ``repr`` (shortest round-trip).  Nothing time- or
host-dependent goes into the output, so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import __version__

TOOL = "tokenshift"


def sig9(x: float | None) -> float | None:
    """Round to 9 significant digits (used for aggregate statistics)."""
    if x is None or not math.isfinite(x) or x == 0.0:
        return x
    return float(f"{x:.9g}")


def jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj) if not f.name.startswith("_")}
    if isinstance(obj, dict):
        return {_key(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (frozenset, set)):
        return [jsonable(v) for v in sorted(obj)]
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _key(k: Any) -> str:
    if isinstance(k, tuple):
        return "->".join(str(x) for x in k)
    return str(k)


def canonical(obj: Any) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical(config).encode()).hexdigest()[:16]


def make_meta(subcommand: str, config: dict, seed: int | None) -> dict:
    return {
        "tool": TOOL,
        "version": __version__,
        "subcommand": subcommand,
        "config_hash": config_hash(config),
        "seed": seed,
        "config": jsonable(config),
    }


def write_json(path: Path, meta: dict, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps({"meta": meta, "data": jsonable(data)}, indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def write_ndjson(path: Path, meta: dict, rows: Iterable[Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(jsonable(row), sort_keys=True) + "\n")
    return path


def _cell(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def write_csv(path: Path, meta: dict, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """``# {meta json}`` line, one header line, then the rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_csv(path: Path) -> tuple[dict, list[dict]]:
    """Inverse of :func:`write_csv` (values stay strings)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta = json.loads(lines[0][2:])
    return meta, list(csv.DictReader(lines[1:]))
