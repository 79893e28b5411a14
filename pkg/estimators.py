"""
Advantage Estimators
====================

Rollout batches tagged with their behavior policy, and the sample-based
estimators that turn them into advantages and value targets: discounted
returns, GAE, and empirical V-trace.

Episode bookkeeping uses two flags per step:

- ``dones``  true termination (no bootstrap)
- ``ends``   any episode boundary: termination, horizon truncation or the
             end of the collection batch; recursions never cross an end

``next_values[t]`` is V(s_{t+1}); at a truncation it is the bootstrap value
of the observation the episode was cut at.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

import policy as pol

logger = logging.getLogger(__name__)

NORMALIZE_STD_FLOOR = 1e-8


class EstimatorError(Exception):
    """Invalid batch contents or estimator parameters."""


@dataclass(frozen=True, eq=False)
class Transition:
    """One environment step under a known behavior policy."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    done: bool
    behavior_logp: float
    behavior_params: np.ndarray
    snapshot_id: int
    next_state: np.ndarray
    truncated: bool = False


@dataclass(frozen=True, eq=False)
class RolloutBatch:
    """Steps collected by one behavior snapshot, in collection order.

    ``behavior_params`` holds the stacked per-state distribution parameters
    (categorical probabilities, or Gaussian mean|std), so per-state KL to any
    later policy is exact without keeping the behavior network.
    """

    snapshot_id: int
    family: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    ends: np.ndarray
    behavior_logp: np.ndarray
    behavior_params: np.ndarray
    next_states: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    next_values: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    episode_returns: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def behavior_distribution(self) -> pol.ActionDistribution:
        return pol.ActionDistribution.from_stacked(self.family, self.behavior_params)

    def with_values(self, values: np.ndarray, next_values: np.ndarray) -> "RolloutBatch":
        values = np.asarray(values, dtype=np.float64)
        next_values = np.asarray(next_values, dtype=np.float64)
        if values.shape != (len(self),) or next_values.shape != (len(self),):
            raise EstimatorError(f"Value predictions must have shape ({len(self)},)")
        return replace(self, values=values, next_values=next_values)

    def with_estimates(self, advantages: np.ndarray, targets: np.ndarray) -> "RolloutBatch":
        return replace(self, advantages=np.asarray(advantages), targets=np.asarray(targets))

    @property
    def has_estimates(self) -> bool:
        return self.advantages is not None

    @property
    def nbytes(self) -> int:
        arrays = [self.states, self.actions, self.rewards, self.dones, self.ends,
                  self.behavior_logp, self.behavior_params]
        arrays += [a for a in (self.next_states, self.values, self.next_values, self.advantages, self.targets)
                   if a is not None]
        return int(sum(a.nbytes for a in arrays))


class RolloutBuilder:
    """Accumulates Transitions of one snapshot and freezes them into a batch."""

    def __init__(self, snapshot_id: int, family: str):
        self.snapshot_id = snapshot_id
        self.family = family
        self._steps: list[Transition] = []
        self._episode_returns: list[float] = []

    def __len__(self) -> int:
        return len(self._steps)

    def add(self, transition: Transition) -> None:
        if transition.snapshot_id != self.snapshot_id:
            raise EstimatorError(
                f"Batch of snapshot {self.snapshot_id} cannot hold a step from snapshot {transition.snapshot_id}"
            )
        if not np.isfinite(transition.behavior_logp):
            raise EstimatorError(f"Non-finite behavior log-density {transition.behavior_logp}")
        self._steps.append(transition)

    def episode_finished(self, episode_return: float) -> None:
        self._episode_returns.append(float(episode_return))

    def build(self, value_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> RolloutBatch:
        """Freeze the batch; the last step is marked as a batch end.

        With ``value_fn`` the batch carries V(s_t) and the bootstrap values.
        """
        if not self._steps:
            raise EstimatorError("Cannot build an empty batch")
        steps = self._steps
        dones = np.array([s.done for s in steps], dtype=bool)
        truncated = np.array([s.truncated for s in steps], dtype=bool)
        ends = dones | truncated
        ends[-1] = True
        batch = RolloutBatch(
            snapshot_id=self.snapshot_id,
            family=self.family,
            states=np.stack([np.asarray(s.state, dtype=np.float64) for s in steps]),
            actions=np.stack([np.asarray(s.action) for s in steps]),
            rewards=np.array([s.reward for s in steps], dtype=np.float64),
            dones=dones,
            ends=ends,
            behavior_logp=np.array([s.behavior_logp for s in steps], dtype=np.float64),
            behavior_params=np.stack([np.asarray(s.behavior_params, dtype=np.float64) for s in steps]),
            next_states=np.stack([np.asarray(s.next_state, dtype=np.float64) for s in steps]),
            episode_returns=list(self._episode_returns),
        )
        if value_fn is None:
            return batch
        return revalue(batch, value_fn)


def revalue(batch: RolloutBatch, value_fn: Callable[[np.ndarray], np.ndarray]) -> RolloutBatch:
    """Fresh V(s_t) and bootstrap values from ``value_fn``.

    Inside an episode V(s_{t+1}) is read from the next row; only episode
    boundaries evaluate the stored next observation.
    """
    if batch.next_states is None:
        raise EstimatorError(f"Batch of snapshot {batch.snapshot_id} has no next states")
    values = np.asarray(value_fn(batch.states), dtype=np.float64)
    next_values = np.empty_like(values)
    next_values[:-1] = values[1:]
    boundary = np.flatnonzero(batch.ends)
    if boundary.size:
        next_values[boundary] = value_fn(batch.next_states[boundary])
    return batch.with_values(values, next_values)


def _require_values(batch: RolloutBatch) -> tuple[np.ndarray, np.ndarray]:
    if batch.values is None or batch.next_values is None:
        raise EstimatorError(f"Batch of snapshot {batch.snapshot_id} has no value predictions")
    return batch.values, batch.next_values


def discounted_returns(rewards: np.ndarray, ends: np.ndarray, gamma: float) -> np.ndarray:
    """Reward-to-go within each episode segment, no bootstrap."""
    out = np.zeros(len(rewards))
    running = 0.0
    for t in reversed(range(len(rewards))):
        if ends[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def gae(batch: RolloutBatch, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets (Â + V).

    Â_t = δ_t + γλ·Â_{t+1} inside an episode, δ_t = r_t + γ·V(s_{t+1})·(1−done_t) − V(s_t).
    """
    if not 0.0 <= lam <= 1.0:
        raise EstimatorError(f"GAE lambda must be in [0, 1], got {lam}")
    values, next_values = _require_values(batch)
    rewards, dones, ends = batch.rewards, batch.dones, batch.ends

    advantages = np.zeros(len(batch))
    last = 0.0
    for t in reversed(range(len(batch))):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_values[t] * nonterminal - values[t]
        carry = 0.0 if ends[t] else 1.0
        last = delta + gamma * lam * carry * last
        advantages[t] = last
    return advantages, advantages + values


def vtrace(
    batch: RolloutBatch,
    target_logp: np.ndarray,
    gamma: float,
    rho_bar: float = 1.0,
    c_bar: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """V-trace targets and advantages of a target policy from behavior data.

    ρ_t = min(π/μ, ρ̄), c_t = min(π/μ, c̄);
    v_t = V_t + ρ_t·δ_t + γ·c_t·(v_{t+1} − V_{t+1});
    advantage_t = ρ_t·(r_t + γ·v_{t+1}·(1−done_t) − V_t).
    """
    if not (c_bar > 0 and rho_bar >= c_bar):
        raise EstimatorError(f"Need rho_bar >= c_bar > 0, got rho_bar={rho_bar}, c_bar={c_bar}")
    values, next_values = _require_values(batch)
    target_logp = np.asarray(target_logp, dtype=np.float64)
    if target_logp.shape != (len(batch),):
        raise EstimatorError(f"Target log-densities must have shape ({len(batch)},)")
    if not np.all(np.isfinite(batch.behavior_logp)):
        raise EstimatorError("Zero behavior density at a visited action")

    with np.errstate(over="ignore"):
        ratios = np.exp(target_logp - batch.behavior_logp)
    rhos = np.minimum(ratios, rho_bar)
    cs = np.minimum(ratios, c_bar)
    rewards, dones, ends = batch.rewards, batch.dones, batch.ends

    n = len(batch)
    targets = np.zeros(n)
    advantages = np.zeros(n)
    correction = 0.0  # v_{t+1} − V_{t+1}
    for t in reversed(range(n)):
        nonterminal = 0.0 if dones[t] else 1.0
        if ends[t]:
            correction = 0.0
            next_target = next_values[t]
        else:
            next_target = targets[t + 1]
        delta = rewards[t] + gamma * next_values[t] * nonterminal - values[t]
        correction = rhos[t] * delta + gamma * cs[t] * correction
        targets[t] = values[t] + correction
        advantages[t] = rhos[t] * (rewards[t] + gamma * next_target * nonterminal - values[t])
    return advantages, targets


def normalize_advantages(batch: RolloutBatch) -> RolloutBatch:
    """Zero-mean, unit (population) std advantages; near-constant ones are left alone."""
    if batch.advantages is None:
        raise EstimatorError(f"Batch of snapshot {batch.snapshot_id} has no advantages to normalize")
    adv = batch.advantages
    std = adv.std()
    if std < NORMALIZE_STD_FLOOR:
        return batch
    return replace(batch, advantages=(adv - adv.mean()) / std)
