"""Metrics CSV files, seed summaries and band-overlap statistics.

Schema version 1. Column order is fixed:

    t_step,L_tot,L_ind,mean_abs_delta,eta,epsilon,selected_count,eval_return

Empty cells mean "not measured at this step" (losses before the first
update, eval_return between evaluations).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import IO, Iterable, Mapping, Optional, Sequence

import numpy as np

from der.errors import MetricsFormatError

logger = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = (
    "t_step",
    "L_tot",
    "L_ind",
    "mean_abs_delta",
    "eta",
    "epsilon",
    "selected_count",
    "eval_return",
)
SUMMARY_COLUMNS = ("mode", "eval_index", "t_step", "mean_eval_step", "n_seeds", "mean", "p25", "p75")


@dataclass(frozen=True)
class MetricsRow:
    t_step: int
    L_tot: Optional[float] = None
    L_ind: Optional[float] = None
    mean_abs_delta: Optional[float] = None
    eta: Optional[float] = None
    epsilon: Optional[float] = None
    selected_count: Optional[int] = None
    eval_return: Optional[float] = None


def _cell(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


class MetricsWriter:
    """Appends rows to a metrics CSV, refusing non-increasing steps or non-finite values."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle: IO[str] = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(METRICS_COLUMNS)
        self.last_step: int | None = None
        self.rows_written = 0

    def append(self, row: MetricsRow) -> None:
        if self.last_step is not None and row.t_step <= self.last_step:
            raise ValueError(f"t_step {row.t_step} does not follow {self.last_step}")
        for name, value in zip(METRICS_COLUMNS, astuple(row)):
            if value is not None and not math.isfinite(value):
                raise ValueError(f"{name}={value} is not finite at t_step {row.t_step}")
        self._writer.writerow([_cell(v) for v in astuple(row)])
        self._handle.flush()
        self.last_step = row.t_step
        self.rows_written += 1

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


class MemorySink:
    """In-memory metrics sink with the writer's ordering contract."""

    def __init__(self) -> None:
        self.rows: list[MetricsRow] = []

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.t_step <= self.rows[-1].t_step:
            raise ValueError(f"t_step {row.t_step} does not follow {self.rows[-1].t_step}")
        self.rows.append(row)


def _parse(path: str, line: int, name: str, text: str) -> float | int | None:
    if text == "":
        return None
    try:
        value: float | int = int(text) if name in ("t_step", "selected_count") else float(text)
    except ValueError:
        raise MetricsFormatError(path, line, f"column {name}: {text!r} is not a number") from None
    if not math.isfinite(value):
        raise MetricsFormatError(path, line, f"column {name} is not finite")
    return value


def read_metrics(path: str | Path) -> list[MetricsRow]:
    where = str(path)
    try:
        handle = Path(path).open(newline="", encoding="utf-8")
    except OSError as exc:
        raise MetricsFormatError(where, 0, f"cannot open: {exc.strerror}") from exc
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise MetricsFormatError(where, 1, "file is empty")
        if tuple(header) != METRICS_COLUMNS:
            raise MetricsFormatError(where, 1, f"unexpected header {','.join(header)}")
        rows: list[MetricsRow] = []
        for line, cells in enumerate(reader, start=2):
            if len(cells) != len(METRICS_COLUMNS):
                raise MetricsFormatError(where, line, f"expected {len(METRICS_COLUMNS)} cells, got {len(cells)}")
            values = [_parse(where, line, n, c) for n, c in zip(METRICS_COLUMNS, cells)]
            if values[0] is None:
                raise MetricsFormatError(where, line, "t_step is empty")
            if rows and values[0] <= rows[-1].t_step:
                raise MetricsFormatError(where, line, "t_step is not strictly increasing")
            rows.append(MetricsRow(*values))  # type: ignore[arg-type]
    logger.debug("read %d metrics rows from %s", len(rows), where)
    return rows


def eval_curve(rows: Iterable[MetricsRow]) -> list[tuple[int, float]]:
    return [(r.t_step, r.eval_return) for r in rows if r.eval_return is not None]


@dataclass(frozen=True)
class SummaryPoint:
    mode: str
    eval_index: int
    t_step: int
    mean_eval_step: float
    n_seeds: int
    mean: float
    p25: float
    p75: float


def eval_checkpoints(rows: Iterable[MetricsRow], eval_interval: int) -> dict[int, tuple[int, float]]:
    """Eval points keyed by the multiple of ``eval_interval`` that triggered them.

    An evaluation runs after the episode whose steps cross a multiple of the
    interval, so its row can sit past that multiple. The key is the largest
    multiple not above the row's t_step; the value is (t_step, eval_return).
    """
    if eval_interval < 1:
        raise ValueError("eval_interval must be at least 1")
    return {step // eval_interval * eval_interval: (step, ret) for step, ret in eval_curve(rows)}


def summarize(
    runs: Mapping[str, Sequence[Sequence[MetricsRow]]],
    eval_interval: int,
) -> list[SummaryPoint]:
    """Mean and 25/75 percentiles of the eval return across seeds, per mode.

    Seeds are aligned on the eval checkpoint (see ``eval_checkpoints``), which
    is reported as t_step next to the mean step the evaluations actually ran
    at. Checkpoints missing from some seed are dropped.
    """
    points: list[SummaryPoint] = []
    for mode, seeds in runs.items():
        curves = [eval_checkpoints(rows, eval_interval) for rows in seeds]
        if not curves:
            continue
        shared = sorted(set.intersection(*(set(c) for c in curves)))
        for k, checkpoint in enumerate(shared):
            steps = np.array([c[checkpoint][0] for c in curves], dtype=np.float64)
            returns = np.array([c[checkpoint][1] for c in curves])
            p25, p75 = np.percentile(returns, [25, 75])
            points.append(
                SummaryPoint(
                    mode,
                    k,
                    checkpoint,
                    float(steps.mean()),
                    len(curves),
                    float(returns.mean()),
                    float(p25),
                    float(p75),
                )
            )
    return points


def write_summary(points: Iterable[SummaryPoint], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for p in points:
            writer.writerow(
                [p.mode, p.eval_index, p.t_step, _cell(p.mean_eval_step), p.n_seeds]
                + [_cell(p.mean), _cell(p.p25), _cell(p.p75)]
            )
    return path


def read_summary(path: str | Path) -> list[SummaryPoint]:
    where = str(path)
    with Path(path).open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        if tuple(next(reader, ())) != SUMMARY_COLUMNS:
            raise MetricsFormatError(where, 1, "unexpected summary header")
        points = []
        for line, cells in enumerate(reader, start=2):
            try:
                mode, idx, step, eval_step, n, mean, p25, p75 = cells
                points.append(
                    SummaryPoint(
                        mode, int(idx), int(step), float(eval_step), int(n), float(mean), float(p25), float(p75)
                    )
                )
            except ValueError as exc:
                raise MetricsFormatError(where, line, str(exc)) from None
    return points


def band_overlap_fraction(points: Sequence[SummaryPoint], mode_a: str, mode_b: str) -> float:
    """Fraction of shared eval checkpoints where the [p25, p75] bands of two modes intersect."""
    a = {p.t_step: p for p in points if p.mode == mode_a}
    b = {p.t_step: p for p in points if p.mode == mode_b}
    shared = sorted(a.keys() & b.keys())
    if not shared:
        raise ValueError(f"modes {mode_a!r} and {mode_b!r} share no eval points")
    hits = sum(1 for k in shared if a[k].p25 <= b[k].p75 and b[k].p25 <= a[k].p75)
    return hits / len(shared)
