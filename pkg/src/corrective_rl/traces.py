"""CSV metric traces written with round-trippable float formatting."""
from __future__ import annotations

import csv


def write_trace(rows: list[dict], path, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_trace(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(f)]


def _fmt(v):
    if isinstance(v, (int, str)) and not isinstance(v, bool):
        return v
    return repr(float(v))


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v
