"""Delimited-text curve files.

A curve file is CSV with the header ``step,lr,loss``; one row per validation
step (post-warmup step index). Values are written with 17 significant digits,
so a write/read round trip reproduces every double exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .laws import LossCurve
from .schedules import Schedule, lr_area_from_samples

__all__ = [
    "CurveFileError",
    "LrSamples",
    "ingest_curve",
    "write_curve",
    "write_table",
    "read_table",
    "schedule_from_samples",
]

HEADER = ("step", "lr", "loss")


class CurveFileError(ValueError):
    """Malformed curve file; ``row`` is the 1-based line number (header is row 1)."""

    def __init__(self, path, row: int | None, message: str):
        self.path = str(path)
        self.row = row
        where = f" at row {row}" if row is not None else ""
        super().__init__(f"{path}: {message}{where}")


@dataclass(frozen=True, eq=False)
class LrSamples:
    """LRs observed at the validation steps of a curve file."""

    steps: np.ndarray
    lrs: np.ndarray

    def area(self, peak_lr: float) -> np.ndarray:
        """Polyline LR-sum surrogate at each sampled step."""
        return lr_area_from_samples(self.steps, self.lrs, peak_lr)


def _fmt(x) -> str:
    if isinstance(x, (str, np.str_)):
        return str(x)
    return "%d" % x if isinstance(x, (int, np.integer)) else "%.17g" % x


def ingest_curve(path) -> tuple[LrSamples, LossCurve]:
    path = Path(path)
    steps, lrs, losses = [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip().lower() for h in header) != HEADER:
            raise CurveFileError(path, 1, f"missing header {','.join(HEADER)}")
        prev = None
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise CurveFileError(path, row_no, f"expected 3 fields, got {len(row)}")
            try:
                step_f = float(row[0])
                lr = float(row[1])
                loss = float(row[2])
            except ValueError:
                raise CurveFileError(path, row_no, "unparseable number") from None
            if not np.isfinite(step_f) or step_f != int(step_f):
                raise CurveFileError(path, row_no, "non-integer step")
            step = int(step_f)
            if step < 1:
                raise CurveFileError(path, row_no, "step below 1")
            if prev is not None and step == prev:
                raise CurveFileError(path, row_no, f"duplicate step {step}")
            if prev is not None and step < prev:
                raise CurveFileError(path, row_no, f"non-monotone step {step} after {prev}")
            if not np.isfinite(lr) or lr < 0:
                raise CurveFileError(path, row_no, "negative or non-finite lr")
            if not np.isfinite(loss) or loss <= 0:
                raise CurveFileError(path, row_no, "non-positive loss")
            prev = step
            steps.append(step)
            lrs.append(lr)
            losses.append(loss)
    if not steps:
        raise CurveFileError(path, None, "no data rows")
    st = np.array(steps, dtype=np.int64)
    return LrSamples(st, np.array(lrs)), LossCurve(st, np.array(losses))


def write_curve(path, steps, lrs, losses) -> None:
    write_table(path, HEADER, [np.asarray(steps, dtype=np.int64), lrs, losses])


def write_table(path, header, columns) -> None:
    """CSV with one column per entry of ``columns``; integer columns stay integral."""
    cols = [np.asarray(c) for c in columns]
    n = {c.shape[0] for c in cols}
    if len(n) != 1 or len(header) != len(cols):
        raise ValueError("columns must match the header and share one length")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def read_table(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    data = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    return {h: data[:, i] for i, h in enumerate(header)}


def schedule_from_samples(samples: LrSamples, peak_lr: float | None = None, warmup_steps: int = 0) -> Schedule:
    """Piecewise-linear schedule through ``(0, peak)`` and every sample.

    Its prefix sums at the sampled steps equal :meth:`LrSamples.area`.
    """
    peak = float(samples.lrs.max()) if peak_lr is None else float(peak_lr)
    T = int(samples.steps[-1])
    grid = np.arange(1, T + 1)
    post = np.interp(grid, np.concatenate(([0], samples.steps)), np.concatenate(([peak], samples.lrs)))
    return Schedule(warmup_steps, peak, post, "explicit")
