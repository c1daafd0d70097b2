"""Training-metrics CSV export.

Floats are written with repr so a reader gets the exact values back and two
runs of the same schedule diff clean.
"""
from __future__ import annotations

from pathlib import Path

from .data import write_text_atomic
from .training import MetricsRow

__all__ = ["format_metrics", "write_metrics"]


def format_metrics(rows: list[MetricsRow]) -> str:
    with_acc = any(r.accuracy is not None for r in rows)
    header = "step,epoch,lr,loss" + (",accuracy" if with_acc else "")
    lines = [header]
    for r in rows:
        line = f"{r.step},{r.epoch},{r.lr!r},{r.loss!r}"
        if with_acc:
            line += "," + ("" if r.accuracy is None else repr(r.accuracy))
        lines.append(line)
    return "\n".join(lines) + "\n"


def write_metrics(path: str | Path, rows: list[MetricsRow]) -> None:
    write_text_atomic(path, format_metrics(rows))
