"""
Objectives
==========

Clipped surrogate losses (PPO, ToPPO, GePPO), the value loss, and the
minibatch type they consume.

All three policy losses go through one code path, ``_clipped_surrogate``,
and differ only in their clip bounds:

    PPO    [1 − ε, 1 + ε]
    ToPPO  [max(r_k − ε, 0), r_k + ε]   r_k = π_k(a|s) / π_{k−i}(a|s)
    GePPO  [r_k − ε, r_k + ε]

so ToPPO on on-policy data (r_k = 1 exactly) is bit-identical to PPO.
Losses are returned for minimization: ``policy_loss = −(surrogate + c·entropy)``.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

import autodiff as ad
import policy as pol
from estimators import RolloutBatch

logger = logging.getLogger(__name__)

BOUND_TOLERANCE = 1e-12


class ObjectiveError(Exception):
    """Inconsistent minibatch or clip bounds."""


@dataclass(frozen=True, eq=False)
class ClipBounds:
    """Per-sample clip window [lower, upper] for the probability ratio."""

    kind: str  # "ppo" | "toppo" | "geppo"
    lower: np.ndarray
    upper: np.ndarray
    epsilon: float

    @classmethod
    def ppo(cls, n: int, epsilon: float) -> "ClipBounds":
        return cls("ppo", np.full(n, 1.0 - epsilon), np.full(n, 1.0 + epsilon), epsilon)

    @classmethod
    def toppo(cls, anchor_ratio: np.ndarray, epsilon: float) -> "ClipBounds":
        anchor_ratio = np.asarray(anchor_ratio, dtype=np.float64)
        return cls("toppo", np.maximum(anchor_ratio - epsilon, 0.0), anchor_ratio + epsilon, epsilon)

    @classmethod
    def geppo(cls, anchor_ratio: np.ndarray, epsilon: float) -> "ClipBounds":
        anchor_ratio = np.asarray(anchor_ratio, dtype=np.float64)
        return cls("geppo", anchor_ratio - epsilon, anchor_ratio + epsilon, epsilon)

    def validate(self) -> list[str]:
        errors = []
        if self.lower.shape != self.upper.shape:
            errors.append(f"{self.kind}: lower/upper shapes differ")
            return errors
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            errors.append(f"{self.kind}: non-finite clip bounds")
        if np.any(self.lower > self.upper):
            errors.append(f"{self.kind}: lower bound above upper bound")
        if np.any(self.upper - self.lower > 2.0 * self.epsilon + BOUND_TOLERANCE):
            errors.append(f"{self.kind}: clip window wider than 2·epsilon")
        if self.kind != "geppo" and np.any(self.lower < 0):
            errors.append(f"{self.kind}: negative lower bound")
        return errors

    def take(self, rows: np.ndarray) -> "ClipBounds":
        return replace(self, lower=self.lower[rows], upper=self.upper[rows])


@dataclass(frozen=True)
class LossBreakdown:
    policy_loss: float
    surrogate: float
    value_loss: float
    entropy: float
    kl: float
    clip_fraction: float
    excluded: int


@dataclass(frozen=True, eq=False)
class Minibatch:
    """Flat training samples with their behavior and anchor densities.

    ``anchor_logp`` / ``anchor_params`` are π_k evaluated once on the
    samples' states when the update starts; they never move with the live
    parameters.
    """

    family: str
    states: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    targets: np.ndarray
    behavior_logp: np.ndarray
    anchor_logp: np.ndarray
    anchor_params: np.ndarray

    def __len__(self) -> int:
        return self.advantages.shape[0]

    @property
    def anchor_ratio(self) -> np.ndarray:
        return np.exp(self.anchor_logp - self.behavior_logp)

    def anchor_distribution(self) -> pol.ActionDistribution:
        return pol.ActionDistribution.from_stacked(self.family, self.anchor_params)

    def take(self, rows: np.ndarray) -> "Minibatch":
        return Minibatch(
            family=self.family,
            states=self.states[rows],
            actions=self.actions[rows],
            advantages=self.advantages[rows],
            targets=self.targets[rows],
            behavior_logp=self.behavior_logp[rows],
            anchor_logp=self.anchor_logp[rows],
            anchor_params=self.anchor_params[rows],
        )

    @classmethod
    def on_policy(cls, batch: RolloutBatch) -> "Minibatch":
        """Samples of the anchor's own batch: anchor densities are the behavior ones."""
        return cls.from_batch(batch, batch.behavior_logp, batch.behavior_params)

    @classmethod
    def from_batch(
        cls,
        batch: RolloutBatch,
        anchor_logp: np.ndarray,
        anchor_params: np.ndarray,
        advantages: Optional[np.ndarray] = None,
    ) -> "Minibatch":
        advantages = batch.advantages if advantages is None else advantages
        if advantages is None or batch.targets is None:
            raise ObjectiveError(f"Batch of snapshot {batch.snapshot_id} has no advantages or targets")
        return cls(
            family=batch.family,
            states=batch.states,
            actions=batch.actions,
            advantages=np.asarray(advantages, dtype=np.float64),
            targets=batch.targets,
            behavior_logp=batch.behavior_logp,
            anchor_logp=np.asarray(anchor_logp, dtype=np.float64),
            anchor_params=np.asarray(anchor_params, dtype=np.float64),
        )

    @classmethod
    def concat(cls, parts: Sequence["Minibatch"]) -> "Minibatch":
        if not parts:
            raise ObjectiveError("Nothing to concatenate")
        if len({p.family for p in parts}) != 1:
            raise ObjectiveError("Cannot mix policy families in one minibatch")
        return cls(
            family=parts[0].family,
            **{
                name: np.concatenate([getattr(p, name) for p in parts])
                for name in ("states", "actions", "advantages", "targets",
                             "behavior_logp", "anchor_logp", "anchor_params")
            },
        )


def zero_incentive(ratio: np.ndarray, advantages: np.ndarray, bounds: ClipBounds) -> np.ndarray:
    """Samples whose gradient vanishes: the clipped branch wins the min."""
    return ((advantages > 0) & (ratio > bounds.upper)) | ((advantages < 0) & (ratio < bounds.lower))


def _clipped_surrogate(
    params: pol.PolicyParams,
    mb: Minibatch,
    bounds: ClipBounds,
    entropy_coef: float = 0.0,
) -> tuple[LossBreakdown, ad.Params]:
    """Negated mean of min(r·Â, clip(r)·Â) plus the entropy bonus, with its gradient.

    A ratio sitting exactly on a clip bound ties the two terms; ``ad.minimum``
    then sends the gradient to its first operand, the unclipped term.
    """
    errors = bounds.validate()
    if errors:
        raise ObjectiveError("; ".join(errors))
    if bounds.lower.shape != (len(mb),):
        raise ObjectiveError(f"Clip bounds cover {bounds.lower.shape[0]} samples, minibatch has {len(mb)}")

    live = pol.distribution(params, mb.states)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio_np = np.exp(pol.log_prob(live, mb.actions) - mb.behavior_logp)
    valid = np.isfinite(ratio_np)
    excluded = int(np.count_nonzero(~valid))
    if excluded:
        logger.debug(f"Excluding {excluded} samples with non-finite importance ratios")
        rows = np.flatnonzero(valid)
        mb, bounds, ratio_np, live = mb.take(rows), bounds.take(rows), ratio_np[rows], live.take(rows)
    if len(mb) == 0:
        raise ObjectiveError("Every sample in the minibatch has a non-finite ratio")

    def objective(p: dict[str, ad.Tensor]) -> ad.Tensor:
        logp, ent = pol.log_prob_tensor(params, p, mb.states, mb.actions)
        ratio = ad.exp(logp - mb.behavior_logp)
        unclipped = ratio * mb.advantages
        clipped = ad.clip(ratio, bounds.lower, bounds.upper) * mb.advantages
        surrogate = ad.mean(ad.minimum(unclipped, clipped))
        return -(surrogate + entropy_coef * ad.mean(ent))

    loss, grads = ad.value_and_grad(objective, params.arrays)

    clipped_np = np.clip(ratio_np, bounds.lower, bounds.upper)
    surrogate = float(np.mean(np.minimum(ratio_np * mb.advantages, clipped_np * mb.advantages)))
    breakdown = LossBreakdown(
        policy_loss=loss,
        surrogate=surrogate,
        value_loss=0.0,
        entropy=float(np.mean(pol.entropy(live))),
        kl=float(np.mean(pol.kl(mb.anchor_distribution(), live))),
        clip_fraction=float(np.mean(clipped_np != ratio_np)),
        excluded=excluded,
    )
    return breakdown, grads


def toppo_loss(
    params: pol.PolicyParams, mb: Minibatch, epsilon: float, entropy_coef: float = 0.0
) -> tuple[LossBreakdown, ad.Params]:
    """Clipped surrogate around the anchor ratio π_k/π_{k−i}, floored at 0."""
    return _clipped_surrogate(params, mb, ClipBounds.toppo(mb.anchor_ratio, epsilon), entropy_coef)


def ppo_loss(
    params: pol.PolicyParams, mb: Minibatch, epsilon: float, entropy_coef: float = 0.0
) -> tuple[LossBreakdown, ad.Params]:
    return _clipped_surrogate(params, mb, ClipBounds.ppo(len(mb), epsilon), entropy_coef)


def geppo_loss(
    params: pol.PolicyParams, mb: Minibatch, epsilon: float, entropy_coef: float = 0.0
) -> tuple[LossBreakdown, ad.Params]:
    """Generalized clip around the anchor ratio without the zero floor.

    ``mb.advantages`` must be V-trace estimates of the current policy's advantage.
    """
    return _clipped_surrogate(params, mb, ClipBounds.geppo(mb.anchor_ratio, epsilon), entropy_coef)


def value_loss(vparams: pol.ValueParams, batch) -> tuple[float, ad.Params]:
    """Mean squared error of V(s) against ``batch.targets``."""
    if batch.targets is None:
        raise ObjectiveError("Value loss needs targets")
    targets = np.asarray(batch.targets, dtype=np.float64)

    def objective(p: dict[str, ad.Tensor]) -> ad.Tensor:
        predictions = pol.value_tensor(vparams, p, batch.states)
        return ad.mean(ad.square(predictions - targets))

    return ad.value_and_grad(objective, vparams.arrays)
