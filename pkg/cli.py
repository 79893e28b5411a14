#!/usr/bin/env python3
"""
ToPPO Lab CLI
=============

Batch front end for training runs, exact bound fuzzing, the V-trace bias
demo and plot-data aggregation.

Usage:
    python cli.py train --config exp.ini --out runs/exp
    python cli.py fuzz-bounds --count 1000 --S 4 --A 3 --out fuzz.csv
    python cli.py vtrace-demo --phi 0.01 --rho-bar 1
    python cli.py plot-data runs/exp/metrics_seed*.csv --out curve.dat
    python cli.py plot-data runs/sweep runs/ppo --out curves.dat

Exit codes: 0 success, 1 usage/config error, 2 invariant violation, 3 runtime failure.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Optional

import numpy as np
from dotenv import load_dotenv

# Load environment variables from .env file if it exists
load_dotenv()

import policy as pol
import progress
import tabular_oracle as oracle
from artifacts import CsvStream, RunArtifacts, read_csv
from config import ConfigError, ExperimentConfig, load_config, save_config
from envs import EnvError, make_env, vtrace_bias_mdp
from events import RunEventLog
from policy_buffer import SELECTION_FIELDS
from trainer import METRICS_FIELDS, RunResult, TrainingError, run_geppo, run_ppo, run_toppo

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VIOLATION = 2
EXIT_RUNTIME = 3

VTRACE_FIELDS = ["state", "pi_rho_0", "pi_rho_1", "v_pi", "v_pi_rho", "v_ratio"]

logger = logging.getLogger(__name__)


def get_version() -> str:
    """Get version from package metadata or fallback to reading pyproject.toml."""
    try:
        return version("toppo-lab")
    except PackageNotFoundError:
        pyproject_path = Path(__file__).parent / "pyproject.toml"
        if pyproject_path.exists():
            import re
            content = pyproject_path.read_text()
            match = re.search(r'^version\s*=\s*["\']([^"\']+)["\']', content, re.MULTILINE)
            if match:
                return match.group(1)
        return "unknown"


class JSONFormatter(logging.Formatter):
    """Format logs as JSON lines."""

    def format(self, record):
        log_entry = {
            "timestamp": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.levelno >= logging.ERROR and record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(log_entry)


def setup_logging(run_dir: Path) -> None:
    """Configure structured logging to file and readable logging to console."""
    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)
    root_logger.handlers = []

    run_dir.mkdir(parents=True, exist_ok=True)
    log_file = run_dir / "session.jsonl"
    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(JSONFormatter())
    root_logger.addHandler(file_handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(os.environ.get("TOPPO_LOG_LEVEL", "INFO").upper())
    console_handler.setFormatter(logging.Formatter("%(message)s"))
    root_logger.addHandler(console_handler)

    logging.debug(f"Logging initialized. Writing to {log_file}")


def _usage_error(messages: list[str]) -> int:
    for message in messages:
        print(f"Error: {message}", file=sys.stderr)
    return EXIT_USAGE


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def experiment_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) with command-line overrides applied."""
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.algo is not None:
        overrides["algorithm"] = args.algo
    if args.no_selection:
        overrides["disable_selection"] = True
    if args.adaptive_eps:
        overrides["adaptive_epsilon"] = True
    cfg = replace(cfg, **overrides)
    errors = cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def train_seed(cfg: ExperimentConfig, seed: int, artifacts: RunArtifacts) -> RunResult:
    """One isolated run: own env, streams and set; per-seed output files."""
    train = cfg.effective_train(seed)
    events = RunEventLog(artifacts.events_path, run_id=f"{cfg.algorithm}-seed{seed}")
    progress.print_run_header(cfg.algorithm, train.env_id, seed, train.iterations)

    with CsvStream(artifacts.metrics_path(seed), METRICS_FIELDS) as metrics_csv, \
            CsvStream(artifacts.selection_path(seed), SELECTION_FIELDS) as selection_csv:

        def on_iteration(row) -> None:
            metrics_csv.write(row.as_row())
            progress.log_iteration(row, seed)

        sinks = {"on_iteration": on_iteration, "on_selection": lambda r: selection_csv.write(r.as_row()), "events": events}
        try:
            if cfg.algorithm == "toppo":
                result = run_toppo(train, selection_enabled=not cfg.disable_selection, **sinks)
            elif cfg.algorithm == "ppo":
                result = run_ppo(train, **sinks)
            else:
                result = run_geppo(train, **sinks)
        except TrainingError as e:
            events.run_failed(str(e))
            raise

    pol.save_snapshot(result.final_params, artifacts.snapshot_path(seed))
    return result


def summarize(cfg: ExperimentConfig, results: dict[int, RunResult]) -> dict:
    finals = {seed: r.final_return for seed, r in results.items()}
    values = np.array([v for v in finals.values() if v is not None], dtype=np.float64)
    wall = {seed: r.wall_time_s for seed, r in results.items()}
    return {
        "algorithm": cfg.algorithm,
        "env_id": cfg.train.env_id,
        "seeds": list(cfg.seeds),
        "buffer_size": cfg.train.buffer_size,
        "alpha": cfg.train.alpha,
        "disable_selection": cfg.disable_selection,
        "adaptive_epsilon": cfg.adaptive_epsilon,
        "final_returns": {str(seed): v for seed, v in finals.items()},
        "mean": float(values.mean()) if values.size else None,
        "std": float(values.std()) if values.size else None,
        "env_steps": {str(seed): r.env_steps for seed, r in results.items()},
        "wall_time_s": {str(seed): t for seed, t in wall.items()},
        "mean_wall_time_s": float(np.mean(list(wall.values()))) if wall else None,
    }


def run_cell(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Train every seed of one config into ``out_dir``; returns the written summary.

    Raises:
        TrainingError: If any seed fails
        OSError: If the directory cannot be prepared
    """
    artifacts = RunArtifacts(out_dir)
    artifacts.prepare()
    save_config(cfg, artifacts.config_path)

    threads = max(1, int(os.environ.get("TOPPO_THREADS", "1")))
    logger.info(
        f"Training {cfg.algorithm} on {cfg.train.env_id} (N={cfg.train.buffer_size}, alpha={cfg.train.alpha}): "
        f"seeds {list(cfg.seeds)}, {threads} thread(s)"
    )
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {seed: pool.submit(train_seed, cfg, seed, artifacts) for seed in cfg.seeds}
        results = {seed: future.result() for seed, future in futures.items()}

    summary = summarize(cfg, results)
    artifacts.write_summary(summary)
    progress.print_summary_table(summary)
    return summary


def handle_train(args: argparse.Namespace) -> int:
    """Train one algorithm over every configured seed, once per sweep cell."""
    try:
        cfg = experiment_from_args(args)
    except FileNotFoundError as e:
        return _usage_error([str(e)])
    except ConfigError as e:
        return _usage_error(e.errors)
    try:
        make_env(cfg.train.env_id)
    except EnvError as e:
        return _usage_error([f"train.env_id: {e}"])

    root = RunArtifacts(Path(cfg.out_dir))
    try:
        root.prepare()
    except OSError as e:
        return _usage_error([f"experiment.out_dir: {e}"])
    setup_logging(root.out_dir)

    cells = cfg.sweep_cells()
    if cfg.is_sweep:
        save_config(cfg, root.config_path)
        logger.info(f"Sweep over {len(cells)} cell(s): {', '.join(label for label, _ in cells)}")
    try:
        for label, cell in cells:
            run_cell(cell, root.out_dir / label if label else root.out_dir)
    except (TrainingError, OSError) as e:
        logger.error(f"Training failed: {e}", exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# fuzz-bounds
# ---------------------------------------------------------------------------


def failed_checks(row: dict) -> list[tuple[str, float]]:
    """(check, margin) for every check a fuzz row fails; negative margin = violated."""
    failed = []
    if row["pdi_gap"] > oracle.BOUND_TOLERANCE:
        failed.append(("performance_difference", -row["pdi_gap"]))
    for prefix in ("l21", "l31"):
        if not row[f"{prefix}_satisfied"]:
            failed.append((prefix, row[f"{prefix}_lhs"] - row[f"{prefix}_rhs"]))
    if row["anchor_consistency_gap"] > oracle.BOUND_TOLERANCE:
        failed.append(("anchor_consistency", -row["anchor_consistency_gap"]))
    if not row["ppo_holds"]:
        failed.append(("ppo_value_improvement", row["ppo_value_after"] - row["ppo_value_before"]))
    if row["visitation_lhs"] > row["visitation_rhs"] + oracle.BOUND_TOLERANCE:
        failed.append(("visitation_shift", row["visitation_rhs"] - row["visitation_lhs"]))
    if row["advantage_lhs"] > row["advantage_rhs"] + oracle.BOUND_TOLERANCE:
        failed.append(("advantage_shift", row["advantage_rhs"] - row["advantage_lhs"]))
    if row["improvement_anchor_gap"] > oracle.BOUND_TOLERANCE:
        failed.append(("improvement_anchor", -row["improvement_anchor_gap"]))
    return failed


def handle_fuzz_bounds(args: argparse.Namespace) -> int:
    """Check the exact identities and lower bounds on random tabular instances."""
    errors = []
    if args.count < 0:
        errors.append(f"--count: must be non-negative, got {args.count}")
    if args.S < 2 or args.A < 2:
        errors.append(f"--S/--A: need at least 2 states and 2 actions, got S={args.S}, A={args.A}")
    elif args.S * args.A > oracle.MAX_TABLE_SIZE:
        errors.append(f"--S/--A: oracle limited to S·A <= {oracle.MAX_TABLE_SIZE}, got {args.S}·{args.A}")
    if not 0.0 <= args.gamma < 1.0:
        errors.append(f"--gamma: must be in [0, 1), got {args.gamma}")
    if not 0.0 <= args.sparsity < 1.0:
        errors.append(f"--sparsity: must be in [0, 1), got {args.sparsity}")
    if errors:
        return _usage_error(errors)

    out = Path(args.out)
    setup_logging(out.parent)
    events = RunEventLog(out.parent / "events.jsonl", run_id=f"fuzz-seed{args.seed}")
    violations = 0
    worst: Optional[float] = None
    try:
        with CsvStream(out, oracle.FUZZ_FIELDS) as report:
            for index in range(args.count):
                row = oracle.fuzz_instance(index, args.seed, args.S, args.A, args.gamma, args.sparsity)
                report.write(row)
                if row["violations"]:
                    violations += 1
                for check, margin in failed_checks(row):
                    logger.warning(f"Instance {index}: {check} violated (margin {margin:.3e})")
                    events.fuzz_violation(index, check, margin)
                    worst = margin if worst is None else min(worst, margin)
    except (oracle.OracleError, EnvError) as e:
        logger.error(f"Fuzzing failed: {e}", exc_info=True)
        return EXIT_RUNTIME

    progress.print_fuzz_report(args.count, violations, worst)
    logger.info(f"Report written to {out}")
    return EXIT_VIOLATION if violations else EXIT_OK


# ---------------------------------------------------------------------------
# vtrace-demo
# ---------------------------------------------------------------------------


def vtrace_demo(phi: float, rho_bar: float, c_bar: float = 1.0, gamma: float = 0.9, on_policy: bool = False) -> list[dict]:
    """π_ρ̄, V^π, V^{π_ρ̄} and |(V^π − V^{π_ρ̄}) / V^π| per state of the bias fixture.

    μ = (φ, 1−φ) and π = (1−φ, φ) in every state; ``on_policy`` sets π = μ.
    """
    if not 0.0 < phi < 1.0:
        raise ValueError(f"phi must be in (0, 1), got {phi}")
    mdp = vtrace_bias_mdp(gamma)
    mu = oracle.TabularPolicy(np.tile([phi, 1.0 - phi], (mdp.S, 1)))
    pi = mu if on_policy else oracle.TabularPolicy(np.tile([1.0 - phi, phi], (mdp.S, 1)))
    v_pi = oracle.evaluate(mdp, pi).V
    pi_rho, v_rho = oracle.vtrace_fixed_point(mdp, pi, mu, rho_bar, c_bar)
    rows = []
    for s in range(mdp.S):
        ratio = abs((v_pi[s] - v_rho[s]) / v_pi[s]) if v_pi[s] != 0 else 0.0
        rows.append({
            "state": s,
            "pi_rho_0": float(pi_rho.probs[s, 0]),
            "pi_rho_1": float(pi_rho.probs[s, 1]),
            "v_pi": float(v_pi[s]),
            "v_pi_rho": float(v_rho[s]),
            "v_ratio": float(ratio),
        })
    return rows


def handle_vtrace_demo(args: argparse.Namespace) -> int:
    """Print and save the truncated-IS bias table."""
    if not 0.0 < args.phi < 1.0:
        return _usage_error([f"--phi: must be strictly between 0 and 1, got {args.phi}"])
    if not (args.c_bar > 0 and args.rho_bar >= args.c_bar):
        return _usage_error([f"--rho-bar: need rho_bar >= c_bar > 0, got {args.rho_bar} and {args.c_bar}"])

    out = Path(args.out)
    setup_logging(out.parent)
    try:
        rows = vtrace_demo(args.phi, args.rho_bar, args.c_bar, args.gamma, args.on_policy)
    except oracle.OracleError as e:
        logger.error(f"V-trace demo failed: {e}", exc_info=True)
        return EXIT_RUNTIME

    print(f"{'state':>5}  {'pi_rho':>17}  {'V^pi':>10}  {'V^pi_rho':>10}  {'ratio':>8}")
    for row in rows:
        print(
            f"{row['state']:>5}  ({row['pi_rho_0']:.6f}, {row['pi_rho_1']:.6f})  "
            f"{row['v_pi']:>10.4f}  {row['v_pi_rho']:>10.4f}  {row['v_ratio']:>8.4f}"
        )
    with CsvStream(out, VTRACE_FIELDS) as table:
        for row in rows:
            table.write(row)
    logger.info(f"Table written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot-data
# ---------------------------------------------------------------------------


def aggregate_curves(paths: list[Path], column: str = "eval_return") -> list[tuple[int, float, float, int]]:
    """(env_steps, mean, std, n) at every step where all files have ``column``.

    Raises:
        ValueError: If the files do not share one header or lack the columns
    """
    curves = []
    header = None
    for path in paths:
        fields, rows = read_csv(path)
        if header is None:
            header = fields
        elif fields != header:
            raise ValueError(f"Schema mismatch: {path} has columns {fields}, expected {header}")
        if "env_steps" not in fields or column not in fields:
            raise ValueError(f"{path} has no 'env_steps' and '{column}' columns")
        curves.append({int(r["env_steps"]): float(r[column]) for r in rows if r[column] != ""})

    steps = sorted(set.intersection(*(set(c) for c in curves))) if curves else []
    out = []
    for step in steps:
        values = np.array([c[step] for c in curves])
        out.append((step, float(values.mean()), float(values.std()), len(values)))
    return out


def curve_groups(paths: list[Path]) -> list[tuple[str, list[Path], Optional[dict]]]:
    """(label, metrics files, summary) per curve to aggregate.

    Explicit CSV files form one group. A run directory contributes its seeds
    as one group; a sweep directory contributes one group per cell.

    Raises:
        FileNotFoundError: If a directory holds no metrics files
        ValueError: If a summary.json is corrupt
    """
    groups = []
    files = [p for p in paths if p.is_file()]
    if files:
        groups.append(("files", files, None))
    for path in paths:
        if path.is_file():
            continue
        run = RunArtifacts(path)
        runs = [run] if run.existing_metrics() else [RunArtifacts(d) for d in sorted(path.iterdir()) if d.is_dir()]
        found = [(r.out_dir.name, r.existing_metrics(), r.load_summary()) for r in runs if r.existing_metrics()]
        if not found:
            raise FileNotFoundError(f"No metrics_seed*.csv files under {path}")
        groups.extend(found)
    return groups


def handle_plot_data(args: argparse.Namespace) -> int:
    """Mean ± std over seeds per timestep, one whitespace-separated block per run."""
    paths = [Path(p) for p in args.csvs]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        return _usage_error([f"Metrics file not found: {m}" for m in missing])
    try:
        groups = curve_groups(paths)
        curves = [(label, files, summary, aggregate_curves(files, args.column)) for label, files, summary in groups]
    except (FileNotFoundError, ValueError) as e:
        return _usage_error([str(e)])

    lines = []
    for label, files, summary, points in curves:
        if lines:
            lines.append("")
        lines.append(f"# env_steps mean std n  ({args.column} over {len(files)} file(s))")
        if summary is not None:
            lines.append(
                f"# {label}: {summary.get('algorithm')} N={summary.get('buffer_size')} alpha={summary.get('alpha')} "
                f"mean_wall_time_s={summary.get('mean_wall_time_s')}"
            )
        lines += [f"{step} {mean!r} {std!r} {n}" for step, mean, std, n in points]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="ToPPO optimization lab",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", "-V", action="version", version=f"toppo-lab {get_version()}")

    subparsers = parser.add_subparsers(dest="command", required=True, help="Command to execute")

    # TRAIN command
    train_parser = subparsers.add_parser("train", help="Train over every configured seed")
    train_parser.add_argument("--config", help="Config file ([train] and [experiment] sections)")
    train_parser.add_argument("--seed", type=int, help="Run this seed only")
    train_parser.add_argument("--out", help="Output directory")
    train_parser.add_argument("--algo", choices=["toppo", "ppo", "geppo"], help="Algorithm")
    train_parser.add_argument("--no-selection", action="store_true", help="Disable policy selection (ToPPO)")
    train_parser.add_argument("--adaptive-eps", action="store_true", help="Clip parameter 4/(N+4)·ε^PPO")
    train_parser.set_defaults(func=handle_train)

    # FUZZ-BOUNDS command
    fuzz_parser = subparsers.add_parser("fuzz-bounds", help="Check the lower bounds on random tabular MDPs")
    fuzz_parser.add_argument("--count", type=int, default=1000, help="Number of random instances")
    fuzz_parser.add_argument("--S", type=int, default=4, help="Number of states")
    fuzz_parser.add_argument("--A", type=int, default=3, help="Number of actions")
    fuzz_parser.add_argument("--gamma", type=float, default=0.9, help="Discount factor")
    fuzz_parser.add_argument("--seed", type=int, default=0, help="Base seed")
    fuzz_parser.add_argument("--sparsity", type=float, default=0.0, help="Fraction of zeroed entries")
    fuzz_parser.add_argument("--out", default="fuzz_report.csv", help="Report CSV")
    fuzz_parser.set_defaults(func=handle_fuzz_bounds)

    # VTRACE-DEMO command
    vtrace_parser = subparsers.add_parser("vtrace-demo", help="Bias of truncated importance sampling")
    vtrace_parser.add_argument("--phi", type=float, default=0.01, help="Behavior/target skew")
    vtrace_parser.add_argument("--rho-bar", type=float, default=1.0, help="Truncation level ρ̄")
    vtrace_parser.add_argument("--c-bar", type=float, default=1.0, help="Trace cutting level c̄")
    vtrace_parser.add_argument("--gamma", type=float, default=0.9, help="Discount factor")
    vtrace_parser.add_argument("--on-policy", action="store_true", help="Use π = μ")
    vtrace_parser.add_argument("--out", default="vtrace_demo.csv", help="Table CSV")
    vtrace_parser.set_defaults(func=handle_vtrace_demo)

    # PLOT-DATA command
    plot_parser = subparsers.add_parser("plot-data", help="Aggregate metrics CSVs into curve blocks")
    plot_parser.add_argument("csvs", nargs="+", help="Metrics CSV files, run directories or sweep directories")
    plot_parser.add_argument("--column", default="eval_return", help="Metric to aggregate")
    plot_parser.add_argument("--out", help="Output file (default: stdout)")
    plot_parser.set_defaults(func=handle_plot_data)

    return parser


def main(argv: Optional[list[str]] = None) -> None:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage; 2 is reserved for invariant violations here
        sys.exit(EXIT_USAGE if e.code else EXIT_OK)
    try:
        code = args.func(args)
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        code = EXIT_RUNTIME
    sys.exit(code)


if __name__ == "__main__":
    main()
