"""Tabulate metrics from one or more run directories into CSV."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable

import tomli

from .pipeline import METHODS, read_metrics

COLUMNS = (
    "run", "seed", "method", "split", "posthoc", "n", "accuracy",
    "ece", "sce", "mce", "overconfidence_ratio", "posterior_gap",
)
SPLIT_ORDER = ("in_domain", "in_domain_heldout", "ood")
POSTHOC_ORDER = ("none", "platt", "isotonic")


def _rank(value, order) -> tuple:
    return (order.index(value), "") if value in order else (len(order), str(value))


def _status(run_dir: Path) -> str | None:
    try:
        return json.loads((run_dir / "MANIFEST.json").read_text()).get("status")
    except (OSError, ValueError):
        return None


def _seed(run_dir: Path):
    try:
        return tomli.loads((run_dir / "config.toml").read_text())["seed"]
    except (OSError, ValueError, KeyError):
        return ""


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def collect_rows(run_dirs: Iterable[str | Path], require_complete: bool = True) -> tuple[list[dict], list[str]]:
    rows, warnings = [], []
    for d in sorted(Path(p) for p in run_dirs):
        status = _status(d)
        if require_complete and status != "complete":
            warnings.append(f"skipped {d}: run is {status or 'missing a manifest'}")
            continue
        if not (d / "metrics.jsonl").exists():
            warnings.append(f"skipped {d}: no metrics.jsonl")
            continue
        seed = _seed(d)
        for m in read_metrics(d):
            rows.append({"run": d.name, "seed": seed, **m})
    rows.sort(
        key=lambda r: (
            r["run"],
            _rank(r["method"], METHODS),
            _rank(r["split"], SPLIT_ORDER),
            _rank(r["posthoc"], POSTHOC_ORDER),
        )
    )
    return rows, warnings


def tabulate(run_dirs: Iterable[str | Path], require_complete: bool = True) -> str:
    """CSV over every row of every complete run.

    Incomplete or unreadable runs are skipped, each with a ``# warning``
    line ahead of the header. Floats use ``repr`` so the table round-trips.
    """
    rows, warnings = collect_rows(run_dirs, require_complete)
    buf = io.StringIO()
    for w in warnings:
        buf.write(f"# warning: {w}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in rows:
        writer.writerow([_cell(r.get(c)) for c in COLUMNS])
    return buf.getvalue()


def read_table(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
