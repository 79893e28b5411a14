"""
Progress Reporting
==================

Console lines for training runs, fuzz reports and the summary table.
Everything goes through the module logger so the JSONL session log keeps a
copy of what was shown.
"""

import logging
import math
from typing import Any, Optional

logger = logging.getLogger(__name__)


def _fmt(value: Optional[float], spec: str = ".2f") -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return format(value, spec)


def print_run_header(algorithm: str, env_id: str, seed: int, iterations: int) -> None:
    """Print a formatted header for one run."""
    logger.info("")
    logger.info("=" * 70)
    logger.info(f"  {algorithm.upper()} on {env_id} | seed {seed} | {iterations} iterations")
    logger.info("=" * 70)
    logger.info("")


def log_iteration(metrics: Any, seed: Optional[int] = None) -> None:
    """One line per iteration; evaluation iterations are logged at INFO."""
    prefix = f"[seed {seed}] " if seed is not None else ""
    line = (
        f"{prefix}it {metrics.iteration:4d} | steps {metrics.env_steps:7d} | "
        f"return {_fmt(metrics.mean_return, '8.2f')} | eval {_fmt(metrics.eval_return, '8.2f')} | "
        f"kl {metrics.kl:.4f} | clip {metrics.clip_fraction:.3f} | "
        f"|M| {metrics.buffer_size} | eps {metrics.epsilon:.4f} | del {metrics.deletions}"
    )
    if metrics.eval_return is not None:
        logger.info(line)
    else:
        logger.debug(line)


def print_summary_table(summary: dict[str, Any]) -> None:
    """Print per-seed final returns with mean and std."""
    logger.info("")
    logger.info("=" * 70)
    logger.info(f"  SUMMARY: {summary.get('algorithm', '?')} on {summary.get('env_id', '?')}")
    logger.info("=" * 70)
    for seed, final in sorted(summary.get("final_returns", {}).items(), key=lambda kv: int(kv[0])):
        logger.info(f"  seed {seed:>4}: {_fmt(final)}")
    logger.info("-" * 70)
    logger.info(f"  mean {_fmt(summary.get('mean'))}  std {_fmt(summary.get('std'))}")
    if summary.get("mean_wall_time_s") is not None:
        wall = summary["mean_wall_time_s"]
        logger.info(f"  wall time per seed {wall:.1f}s  (N={summary.get('buffer_size')}, alpha={summary.get('alpha')})")
    logger.info("")


def print_fuzz_report(count: int, violations: int, worst_margin: Optional[float]) -> None:
    if violations:
        logger.info(f"Fuzz: {violations} violation(s) over {count} instances (worst margin {_fmt(worst_margin, '.3e')})")
    else:
        logger.info(f"Fuzz: {count} instances, no violations")
