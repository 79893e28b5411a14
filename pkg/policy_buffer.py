"""
Policy Set
==========

The replay structure of ToPPO: up to N behavior batches, each tagged with
the snapshot that collected it, plus the KL-based selection step and the
clipping-parameter schedule.

Entries keep trajectories and per-state distribution parameters only. The
one full parameter snapshot held here is the most recently inserted policy
(the anchor π_k).
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

import policy as pol
from estimators import RolloutBatch

logger = logging.getLogger(__name__)

SELECTION_FIELDS = ["iteration", "snapshot_id", "delta_hat", "action"]


class PolicySetError(Exception):
    """Invalid insert, capacity or schedule argument."""


@dataclass(frozen=True, eq=False)
class PolicyEntry:
    snapshot_id: int
    batch: RolloutBatch


@dataclass(frozen=True)
class SelectionRecord:
    """One row of the selection log."""

    iteration: int
    snapshot_id: int
    delta_hat: float
    action: str  # "kept" | "deleted" | "evicted"

    def as_row(self) -> dict:
        return {
            "iteration": self.iteration,
            "snapshot_id": self.snapshot_id,
            "delta_hat": self.delta_hat,
            "action": self.action,
        }


def delta_hat(batch: RolloutBatch, current: pol.PolicyParams) -> float:
    """Mean over the batch's visited states of KL(μ(·|s) ‖ π(·|s)), exact per state."""
    behavior = batch.behavior_distribution()
    live = pol.distribution(current, batch.states)
    return float(np.mean(pol.kl(behavior, live)))


class PolicySet:
    """FIFO set of behavior batches with capacity N and filter boundary α."""

    def __init__(self, capacity: int, alpha: float, selection_enabled: bool = True):
        if capacity < 1:
            raise PolicySetError(f"Capacity must be at least 1, got {capacity}")
        if alpha < 0:
            raise PolicySetError(f"Filter boundary must be non-negative, got {alpha}")
        self.capacity = capacity
        self.alpha = alpha
        self.selection_enabled = selection_enabled
        self._entries: deque[PolicyEntry] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[PolicyEntry]:
        return iter(self._entries)

    @property
    def snapshot_ids(self) -> list[int]:
        return [e.snapshot_id for e in self._entries]

    @property
    def newest(self) -> Optional[PolicyEntry]:
        return self._entries[-1] if self._entries else None

    def insert(self, batch: RolloutBatch, snapshot: pol.PolicyParams, iteration: int = 0) -> list[SelectionRecord]:
        """Append a batch; the oldest entry is evicted when over capacity.

        Raises:
            PolicySetError: On a repeated or non-increasing snapshot id, or a
                batch collected by another snapshot
        """
        if batch.snapshot_id != snapshot.snapshot_id:
            raise PolicySetError(
                f"Batch of snapshot {batch.snapshot_id} inserted with snapshot {snapshot.snapshot_id}"
            )
        if snapshot.snapshot_id in self.snapshot_ids:
            raise PolicySetError(f"Duplicate snapshot id {snapshot.snapshot_id}")
        if self._entries and snapshot.snapshot_id < self._entries[-1].snapshot_id:
            raise PolicySetError(
                f"Snapshot {snapshot.snapshot_id} is older than the newest entry {self._entries[-1].snapshot_id}"
            )

        records = []
        self._entries.append(PolicyEntry(snapshot.snapshot_id, batch))
        while len(self._entries) > self.capacity:
            oldest = self._entries.popleft()
            logger.debug(f"Evicted snapshot {oldest.snapshot_id} (capacity {self.capacity})")
            records.append(SelectionRecord(iteration, oldest.snapshot_id, float("nan"), "evicted"))
        return records

    def select(self, current: pol.PolicyParams, iteration: int = 0) -> list[SelectionRecord]:
        """Delete every entry whose δ̂ to ``current`` exceeds α.

        The newest entry and any entry collected by ``current`` itself are
        always retained. Returns one record per examined entry.
        """
        if not self.selection_enabled or not self._entries:
            return []
        newest_id = self._entries[-1].snapshot_id
        records = []
        kept: deque[PolicyEntry] = deque()
        for entry in self._entries:
            d = delta_hat(entry.batch, current)
            protected = entry.snapshot_id in (newest_id, current.snapshot_id)
            if d > self.alpha and not protected:
                records.append(SelectionRecord(iteration, entry.snapshot_id, d, "deleted"))
                logger.debug(f"Deleted snapshot {entry.snapshot_id}: delta_hat={d:.4g} > alpha={self.alpha}")
            else:
                records.append(SelectionRecord(iteration, entry.snapshot_id, d, "kept"))
                kept.append(entry)
        self._entries = kept
        return records

    def violations(self, current: pol.PolicyParams) -> list[int]:
        """Snapshot ids (other than the newest) whose δ̂ to ``current`` exceeds α."""
        if not self._entries:
            return []
        newest_id = self._entries[-1].snapshot_id
        return [
            e.snapshot_id
            for e in self._entries
            if e.snapshot_id not in (newest_id, current.snapshot_id) and delta_hat(e.batch, current) > self.alpha
        ]

    def sample_behavior(self, rng: np.random.Generator, current_id: Optional[int] = None) -> Optional[PolicyEntry]:
        """Uniform draw over entries not collected by ``current_id`` (default: the newest)."""
        if current_id is None:
            current_id = self._entries[-1].snapshot_id if self._entries else None
        eligible = [e for e in self._entries if e.snapshot_id != current_id]
        if not eligible:
            return None
        return eligible[int(rng.integers(len(eligible)))]

    def nbytes(self) -> int:
        return sum(e.batch.nbytes for e in self._entries)


@dataclass(frozen=True)
class EpsilonSchedule:
    """Clipping parameter in effect for a given effective set size.

    fixed:    ``fixed_epsilon`` throughout
    adaptive: ε^PPO when N_eff = 1, else 4/(N_eff + 4)·ε^PPO
    """

    mode: str
    base_epsilon: float
    fixed_epsilon: float

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "adaptive"):
            raise PolicySetError(f"Unknown epsilon mode '{self.mode}'")
        if self.base_epsilon <= 0 or self.fixed_epsilon <= 0:
            raise PolicySetError("Clipping parameters must be positive")

    def epsilon(self, n_eff: int) -> float:
        return epsilon(self, n_eff)


def epsilon(sched: EpsilonSchedule, n_eff: int) -> float:
    if n_eff < 1:
        raise PolicySetError(f"Effective set size must be at least 1, got {n_eff}")
    if sched.mode == "fixed":
        return sched.fixed_epsilon
    if n_eff == 1:
        return sched.base_epsilon
    return 4.0 / (n_eff + 4.0) * sched.base_epsilon
