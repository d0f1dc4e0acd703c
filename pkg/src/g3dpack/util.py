"""Deterministic serialization helpers shared across the toolkit.

Every emitted artifact (CSV, JSON, SVG) must be byte-stable for a given
config and seed, so floats are written with repr (shortest round-trip),
keys are sorted, and CSV rows carry a provenance comment header.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from typing import Any, Iterable, Mapping, Sequence

from . import __version__


def canonical_json(obj: Any) -> str:
    """Sorted-key, minimal-separator JSON; stable across runs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(mapping: Mapping[str, Any]) -> str:
    """Twelve hex chars identifying a config mapping."""
    digest = hashlib.sha256(canonical_json(dict(mapping)).encode("utf-8"))
    return digest.hexdigest()[:12]


def fmt(value: Any) -> str:
    """Column formatter: repr for floats, str otherwise.

    Floats are coerced to the builtin first; numpy scalars satisfy
    isinstance(..., float) but repr as np.float64(...)."""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def provenance_comment(chash: str, seed: int) -> str:
    return f"# config_hash={chash} seed={seed} version={__version__}"


def render_csv(
    fieldnames: Sequence[str],
    rows: Iterable[Sequence[Any]],
    comments: Sequence[str] = (),
) -> str:
    """CSV text with leading # comment lines and a header row."""
    buf = io.StringIO()
    for line in comments:
        if not line.startswith("#"):
            line = "# " + line
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fieldnames)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(
    path,
    fieldnames: Sequence[str],
    rows: Iterable[Sequence[Any]],
    comments: Sequence[str] = (),
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(render_csv(fieldnames, rows, comments))


def read_csv(path) -> tuple[list[str], list[list[str]], list[str]]:
    """Inverse of write_csv: (fieldnames, rows, comment lines)."""
    comments: list[str] = []
    body: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                comments.append(line.rstrip("\n"))
            else:
                body.append(line)
    reader = csv.reader(body)
    table = [row for row in reader if row]
    if not table:
        raise ValueError(f"{path}: empty CSV")
    return table[0], table[1:], comments


def write_json(path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=1, allow_nan=False))
        fh.write("\n")


def read_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
