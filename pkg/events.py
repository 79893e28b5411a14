"""
Run Event Log
=============

Append-only JSON-lines log of notable training events (run start/end,
policy-set deletions, evaluations, early stops) for audit and debugging.
"""

import json
import logging
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

logger = logging.getLogger(__name__)

# one writer at a time when seeds fan out over threads into a shared log
_WRITE_LOCK = threading.Lock()


class EventType(str, Enum):
    """Event types written by trainers and the CLI."""

    RUN_STARTED = "RUN_STARTED"
    RUN_FINISHED = "RUN_FINISHED"
    RUN_FAILED = "RUN_FAILED"

    POLICY_INSERTED = "POLICY_INSERTED"
    POLICY_EVICTED = "POLICY_EVICTED"
    POLICY_DELETED = "POLICY_DELETED"

    EARLY_STOP = "EARLY_STOP"
    EVALUATION = "EVALUATION"

    FUZZ_VIOLATION = "FUZZ_VIOLATION"


@dataclass
class Event:
    """A single event in the log."""

    timestamp: str
    type: str
    runId: str
    data: dict[str, Any]

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class RunEventLog:
    """Append-only event log for one run (one algorithm/seed pair)."""

    def __init__(self, log_path: Optional[Path], run_id: str):
        self.log_path = Path(log_path) if log_path is not None else None
        self.runId = run_id

    def log_event(self, event_type: Union[str, EventType], data: dict[str, Any]) -> None:
        if isinstance(event_type, EventType):
            event_type = event_type.value
        logger.debug(f"[{self.runId}] {event_type}: {data}")
        if self.log_path is None:
            return

        event = Event(
            timestamp=datetime.now(timezone.utc).isoformat(),
            type=event_type,
            runId=self.runId,
            data=data,
        )
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with _WRITE_LOCK:
            with open(self.log_path, "a") as f:
                f.write(event.to_json_line())
                f.write("\n")

    def run_started(self, algorithm: str, seed: int, env_id: str) -> None:
        self.log_event(EventType.RUN_STARTED, {"algorithm": algorithm, "seed": seed, "env": env_id})

    def run_finished(self, iterations: int, env_steps: int, final_return: Optional[float]) -> None:
        self.log_event(
            EventType.RUN_FINISHED,
            {"iterations": iterations, "envSteps": env_steps, "finalReturn": final_return},
        )

    def run_failed(self, error: str) -> None:
        self.log_event(EventType.RUN_FAILED, {"error": error})

    def policy_inserted(self, iteration: int, snapshot_id: int, size: int) -> None:
        self.log_event(
            EventType.POLICY_INSERTED,
            {"iteration": iteration, "snapshotId": snapshot_id, "size": size},
        )

    def policy_evicted(self, iteration: int, snapshot_id: int) -> None:
        self.log_event(EventType.POLICY_EVICTED, {"iteration": iteration, "snapshotId": snapshot_id})

    def policy_deleted(self, iteration: int, snapshot_id: int, delta_hat: float) -> None:
        self.log_event(
            EventType.POLICY_DELETED,
            {"iteration": iteration, "snapshotId": snapshot_id, "deltaHat": delta_hat},
        )

    def early_stop(self, iteration: int, epoch: int, mean_kl: float) -> None:
        self.log_event(EventType.EARLY_STOP, {"iteration": iteration, "epoch": epoch, "meanKl": mean_kl})

    def evaluation(self, iteration: int, env_steps: int, mean_return: float) -> None:
        self.log_event(
            EventType.EVALUATION,
            {"iteration": iteration, "envSteps": env_steps, "meanReturn": mean_return},
        )

    def fuzz_violation(self, instance: int, check: str, margin: float) -> None:
        self.log_event(EventType.FUZZ_VIOLATION, {"instance": instance, "check": check, "margin": margin})


def read_events(log_path: Path, limit: Optional[int] = None) -> list[Event]:
    """Read events back; malformed lines are skipped with a warning."""
    if not log_path.exists():
        return []

    events = []
    with open(log_path, "r") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                events.append(Event(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                logger.warning(f"Skipping malformed event log line: {e}")

    if limit and len(events) > limit:
        events = events[-limit:]
    return events
