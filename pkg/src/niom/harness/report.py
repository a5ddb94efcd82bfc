"""Benchmark tables: one row per corruption kind, an Average row and a time row.

Columns are AUC@5/10/20 (percent, two decimals) per evaluated method, a
method being a matcher and weight mode combination. Runs are grouped by
(condition, method); each group must be a single run.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..corruptions import CorruptionKind
from .pipeline import THRESHOLDS, RunReport

AVERAGE = "Average"
TIME = "Time per pair [msec.]"
_ORDER = ["Clean"] + [k.label for k in CorruptionKind]


@dataclass
class Table:
    methods: list[str]
    conditions: list[str]
    auc: dict  # (condition, method) -> [auc@5, auc@10, auc@20] as fractions
    time_ms: dict  # method -> median per-pair wall time

    def average(self, method: str) -> list[float] | None:
        """Mean over corruption rows; over all rows when the run had no corruption."""
        rows = [c for c in self.conditions if c != "Clean"] or list(self.conditions)
        vals = [self.auc[(c, method)] for c in rows if self.auc.get((c, method)) is not None]
        if not vals:
            return None
        return list(np.mean(np.asarray(vals), axis=0))

    def header(self) -> list[str]:
        return ["condition"] + [f"{m} AUC@{int(t)}" for m in self.methods for t in THRESHOLDS]

    def rows(self) -> list[list[str]]:
        def fmt(v):
            return "" if v is None else f"{100.0 * v:.2f}"

        out = []
        for cond in self.conditions + [AVERAGE]:
            row = [cond]
            for m in self.methods:
                vals = self.average(m) if cond == AVERAGE else self.auc.get((cond, m))
                row += [fmt(v) for v in vals] if vals is not None else [""] * len(THRESHOLDS)
            out.append(row)
        time_row = [TIME]
        for m in self.methods:
            time_row += [f"{self.time_ms[m]:.1f}"] + [""] * (len(THRESHOLDS) - 1)
        out.append(time_row)
        return out


def build_table(runs: list[RunReport]) -> Table:
    if not runs:
        raise ValueError("no runs to report")
    methods, auc, times = [], {}, {}
    for run in runs:
        key = (run.condition, run.method)
        if key in auc:
            raise ValueError(f"duplicate run for condition {key[0]!r} and method {key[1]!r}")
        if run.method not in methods:
            methods.append(run.method)
        auc[key] = run.auc()
        times.setdefault(run.method, []).extend(r.time_ms for r in run.records)
    conditions = sorted({c for c, _ in auc}, key=lambda c: _ORDER.index(c) if c in _ORDER else len(_ORDER))
    time_ms = {m: float(np.median(v)) if v else 0.0 for m, v in times.items()}
    return Table(methods, conditions, auc, time_ms)


def to_markdown(table: Table) -> str:
    header = table.header()
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] + ["---:"] * (len(header) - 1)) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in table.rows()]
    note = ("\nTimes are median wall-clock per pair on CPU after one warm-up pair; "
            "they are not comparable to GPU timings.\n")
    return "\n".join(lines) + "\n" + note


def to_csv(table: Table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.header())
    writer.writerows(table.rows())
    return buf.getvalue()


def parse_csv(text: str) -> dict:
    """``{(row, column): float}`` for every non-empty cell of a report CSV."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    out = {}
    for row in reader:
        for col, cell in zip(header[1:], row[1:]):
            if cell != "":
                out[(row[0], col)] = float(cell)
    return out


def render_report(runs: list[RunReport], fmt: str, out_path: str | Path | None = None) -> str:
    table = build_table(runs)
    if fmt == "markdown":
        text = to_markdown(table)
    elif fmt == "csv":
        text = to_csv(table)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if out_path is not None:
        Path(out_path).write_text(text)
    return text
