"""SVG learning curves of greedy evaluation return."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from der.errors import MetricsFormatError  # noqa: E402
from der.metrics import MetricsRow, eval_curve, read_metrics  # noqa: E402

logger = logging.getLogger(__name__)


def group_metrics_paths(paths: Sequence[str | Path]) -> dict[str, list[Path]]:
    """Group ``<group>/seed-<s>/metrics.csv`` files by ``<group>``.

    Files outside that layout form one group named after their common parent.
    """
    resolved = [Path(p) for p in paths]
    groups: dict[str, list[Path]] = {}
    loose: list[Path] = []
    for path in resolved:
        if path.parent.name.startswith("seed-"):
            groups.setdefault(path.parent.parent.name, []).append(path)
        else:
            loose.append(path)
    if loose:
        parents = {p.parent for p in loose}
        name = parents.pop().name if len(parents) == 1 else "runs"
        groups.setdefault(name or "runs", []).extend(loose)
    return groups


def plot_curves(groups: Mapping[str, Sequence[Sequence[MetricsRow]]], out_svg: str | Path) -> Path:
    """One line per group; groups with two or more runs get the mean and a 25-75% band."""
    out = Path(out_svg)
    if out.suffix.lower() != ".svg":
        raise ValueError(f"plots are written as SVG, got {out.name}")
    if not any(eval_curve(rows) for runs in groups.values() for rows in runs):
        raise ValueError("no run has evaluation points to plot")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    try:
        for label, runs in groups.items():
            curves = [eval_curve(rows) for rows in runs]
            curves = [c for c in curves if c]
            if not curves:
                logger.warning("group %s has no evaluation points; skipped", label)
                continue
            length = min(len(c) for c in curves)
            steps = np.array([s for s, _ in curves[0][:length]])
            returns = np.array([[r for _, r in c[:length]] for c in curves])
            (line,) = ax.plot(steps, returns.mean(axis=0), label=label)
            if len(curves) >= 2:
                p25, p75 = np.percentile(returns, [25, 75], axis=0)
                ax.fill_between(steps, p25, p75, color=line.get_color(), alpha=0.25, linewidth=0)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("mean greedy return")
        ax.grid(alpha=0.3)
        if ax.lines:
            ax.legend()
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, format="svg", bbox_inches="tight")
    finally:
        plt.close(fig)
    logger.info("wrote %s", out)
    return out


def _read_for_plot(path: Path) -> list[MetricsRow]:
    rows = read_metrics(path)
    if not rows:
        raise MetricsFormatError(str(path), 2, "no data rows after the header")
    return rows


def plot_files(paths: Sequence[str | Path], out_svg: str | Path) -> Path:
    """Plot metrics files grouped by ``group_metrics_paths``.

    A file without data rows is an error, and so is a set of files without a
    single evaluation point.
    """
    groups: dict[str, list[list[MetricsRow]]] = {}
    last: tuple[Path, int] | None = None
    for name, members in group_metrics_paths(paths).items():
        groups[name] = []
        for path in members:
            rows = _read_for_plot(path)
            groups[name].append(rows)
            last = (path, len(rows) + 1)
    if last is not None and not any(eval_curve(rows) for runs in groups.values() for rows in runs):
        raise MetricsFormatError(str(last[0]), last[1], f"no eval_return values in any of {len(paths)} input files")
    return plot_curves(groups, out_svg)
