"""Command-line entry points: ``train``, ``compare`` and ``plot``.

Exit statuses: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from multiprocessing import Pool
from pathlib import Path
from typing import Sequence

from der.config import RunConfig, dump_config, load_config
from der.errors import ConfigError, DERError
from der.metrics import MetricsWriter, read_metrics, summarize, write_summary
from der.plotting import plot_files
from der.trainer import train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

BASE_MODES = ("joint-baseline", "divide-only", "der")
MODE_ALIASES = {"warm-up": "der"}


def run_training(config: RunConfig, seed: int, out_dir: str | Path) -> Path:
    """Train one seed into ``out_dir``: config snapshot, metrics.csv, checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.yaml")
    with MetricsWriter(out / "metrics.csv") as writer:
        train(config, seed, writer, out)
    return out / "metrics.csv"


def train_cmd(config_path: str | Path, seed: int, out_dir: str | Path) -> int:
    config = load_config(config_path)
    path = run_training(config, seed, out_dir)
    logger.info("metrics written to %s", path)
    return EXIT_OK


@dataclass(frozen=True)
class ModeSpec:
    """A compare condition: its directory label, training mode and optional fixed eta."""

    label: str
    mode: str
    fixed_eta: float | None = None


def parse_mode(text: str) -> ModeSpec:
    name = text.strip()
    if name.startswith("eta="):
        try:
            eta = float(name[4:])
        except ValueError:
            raise ConfigError(f"fixed sample ratio {name!r} is not a number") from None
        if not 0.0 < eta <= 1.0:
            raise ConfigError(f"fixed sample ratio {eta} outside (0, 1]")
        return ModeSpec(name, "der", eta)
    if name in MODE_ALIASES:
        return ModeSpec(name, MODE_ALIASES[name])
    if name not in BASE_MODES:
        raise ConfigError(f"unknown mode {name!r}; expected one of {', '.join(BASE_MODES)}, warm-up or eta=<value>")
    return ModeSpec(name, name)


def _split(values: str) -> list[str]:
    return [v for v in (part.strip() for part in values.split(",")) if v]


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in _split(text)]
    except ValueError:
        raise ConfigError(f"seed list {text!r} must be comma-separated integers") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError(f"seed list {text!r} must be non-empty without duplicates")
    return seeds


def _compare_task(task: tuple[RunConfig, int, str]) -> str:
    config, seed, out_dir = task
    logger.info("starting %s seed %d", out_dir, seed)
    return str(run_training(config, seed, out_dir))


def compare_cmd(
    config_path: str | Path,
    modes: Sequence[str],
    seeds: Sequence[int],
    out_dir: str | Path,
    workers: int = 1,
) -> int:
    config = load_config(config_path)
    specs = [parse_mode(m) for m in modes]
    if len({s.label for s in specs}) != len(specs):
        raise ConfigError("duplicate modes in --modes")
    out = Path(out_dir)
    tasks = [
        (config.with_mode(spec.mode, spec.fixed_eta), seed, str(out / spec.label / f"seed-{seed}"))  # type: ignore[arg-type]
        for spec in specs
        for seed in seeds
    ]
    logger.info("launching %d runs (%d modes x %d seeds) with %d workers", len(tasks), len(specs), len(seeds), workers)
    if workers > 1:
        with Pool(workers) as pool:
            paths = pool.map(_compare_task, tasks)
    else:
        paths = [_compare_task(task) for task in tasks]

    runs: dict[str, list] = {spec.label: [] for spec in specs}
    for (_, _, run_dir), path in zip(tasks, paths):
        runs[Path(run_dir).parent.name].append(read_metrics(path))
    summary = write_summary(summarize(runs, config.eval.interval), out / "summary.csv")
    logger.info("summary written to %s", summary)
    return EXIT_OK


def plot_cmd(metrics_paths: Sequence[str | Path], out_svg: str | Path) -> int:
    if not metrics_paths:
        raise ConfigError("plot needs at least one metrics file")
    if Path(out_svg).suffix.lower() != ".svg":
        raise ConfigError(f"plot output must be an .svg file, got {out_svg}")
    plot_files(metrics_paths, out_svg)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="der", description="Multi-agent Q-learning with divided experience replay")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="Train one seed")
    p_train.add_argument("--config", required=True, help="Path to the YAML run config")
    p_train.add_argument("--seed", type=int, required=True, help="Random seed")
    p_train.add_argument("--out", required=True, help="Output directory")

    p_compare = sub.add_parser("compare", help="Train several modes over several seeds")
    p_compare.add_argument("--config", required=True, help="Path to the YAML run config")
    p_compare.add_argument(
        "--modes",
        required=True,
        help="Comma-separated: joint-baseline, divide-only, der (or warm-up), eta=<value>",
    )
    p_compare.add_argument("--seeds", help="Comma-separated seeds; defaults to run.seeds of the config")
    p_compare.add_argument("--out", required=True, help="Output directory")
    p_compare.add_argument("--workers", type=int, default=1, help="Number of parallel runs")

    p_plot = sub.add_parser("plot", help="Render eval-return curves to SVG")
    p_plot.add_argument("--in", dest="inputs", nargs="+", required=True, help="Metrics CSV files")
    p_plot.add_argument("--out", required=True, help="Output .svg file")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return train_cmd(args.config, args.seed, args.out)
        if args.command == "compare":
            seeds = parse_seeds(args.seeds) if args.seeds else load_config(args.config).run.seeds
            return compare_cmd(args.config, _split(args.modes), seeds, args.out, max(args.workers, 1))
        return plot_cmd(args.inputs, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DERError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
