"""
Trainer
=======

Training loops for ToPPO and its two baselines, PPO and GePPO.

One iteration:

1. collect n steps with the current snapshot π_k and insert the batch
2. build the update dataset (on-policy batch plus one behavior batch)
3. run epochs × minibatches of Adam steps with KL early stopping
4. select: drop stored batches whose δ̂ to π_{k+1} exceeds α

Every loop is strictly sequential and draws all randomness from
``config.rng_streams(seed)``, so (config, seed) fully determines the metrics.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

import autodiff as ad
import policy as pol
from config import TrainConfig, rng_streams
from envs import Env, EnvError, make_env
from estimators import EstimatorError, RolloutBatch, RolloutBuilder, Transition, gae, normalize_advantages, revalue, vtrace
from events import RunEventLog
from objectives import LossBreakdown, Minibatch, ObjectiveError, geppo_loss, ppo_loss, toppo_loss, value_loss
from policy_buffer import EpsilonSchedule, PolicySet, PolicySetError, SelectionRecord

logger = logging.getLogger(__name__)

METRICS_FIELDS = [
    "iteration",
    "env_steps",
    "mean_return",
    "eval_return",
    "policy_loss",
    "value_loss",
    "entropy",
    "kl",
    "clip_fraction",
    "buffer_size",
    "epsilon",
    "behavior_id",
    "deletions",
    "epochs",
    "excluded",
]

LossFn = Callable[[pol.PolicyParams, Minibatch, float, float], tuple[LossBreakdown, ad.Params]]


class TrainingError(Exception):
    """A run had to be aborted (environment failure or non-finite loss)."""


class EarlyStop(str, Enum):
    CONTINUE = "continue"
    STOP = "stop"


@dataclass(frozen=True)
class IterationMetrics:
    """One metrics CSV row. ``eval_return`` is None on non-evaluation iterations."""

    iteration: int
    env_steps: int
    mean_return: float
    eval_return: Optional[float]
    policy_loss: float
    value_loss: float
    entropy: float
    kl: float
    clip_fraction: float
    buffer_size: int
    epsilon: float
    behavior_id: Optional[int]
    deletions: int
    epochs: int
    excluded: int

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    kl: float
    clip_fraction: float
    epochs: int
    excluded: int


@dataclass
class RunResult:
    algorithm: str
    metrics: list[IterationMetrics]
    final_params: pol.PolicyParams
    value_params: pol.ValueParams
    selection_log: list[SelectionRecord] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def env_steps(self) -> int:
        return self.metrics[-1].env_steps if self.metrics else 0

    @property
    def final_return(self) -> Optional[float]:
        """Last evaluation return of the run."""
        for row in reversed(self.metrics):
            if row.eval_return is not None:
                return row.eval_return
        return None


def early_stop(mean_kl: float, threshold: float) -> EarlyStop:
    """Stop the epoch loop once the mean KL(π_k ‖ π_live) exceeds ``threshold``."""
    if not mean_kl >= 0.0:
        raise TrainingError(f"Mean KL must be non-negative, got {mean_kl}")
    return EarlyStop.STOP if mean_kl > threshold else EarlyStop.CONTINUE


# ---------------------------------------------------------------------------
# Collection and evaluation
# ---------------------------------------------------------------------------


class Collector:
    """Steps one environment; episodes run on across collection batches."""

    def __init__(self, env: Env):
        self.env = env
        self.family = env.spec.policy_family
        self._obs = env.reset()
        self._episode_return = 0.0

    def collect(
        self,
        params: pol.PolicyParams,
        vparams: pol.ValueParams,
        n: int,
        rng: np.random.Generator,
    ) -> RolloutBatch:
        """Exactly ``n`` steps with ``params``; the last one is a bootstrapped cut."""
        builder = RolloutBuilder(params.snapshot_id, self.family)
        for _ in range(n):
            dist = pol.distribution(params, self._obs)
            sampled = pol.sample(dist, rng)
            logp = float(pol.log_prob(dist, sampled)[0])
            action = sampled[0]
            try:
                step = self.env.step(action)
            except EnvError as e:
                raise TrainingError(f"Environment failure at snapshot {params.snapshot_id}: {e}") from e
            self._episode_return += step.reward
            builder.add(
                Transition(
                    state=self._obs,
                    action=action,
                    reward=step.reward,
                    done=step.done and not step.truncated,
                    behavior_logp=logp,
                    behavior_params=dist.stacked()[0],
                    snapshot_id=params.snapshot_id,
                    next_state=step.observation,
                    truncated=step.truncated,
                )
            )
            if step.done:
                builder.episode_finished(self._episode_return)
                self._episode_return = 0.0
                self._obs = self.env.reset()
            else:
                self._obs = step.observation
        return builder.build(lambda states: pol.value(vparams, states))


def evaluate_policy(
    params: pol.PolicyParams,
    env_id: str,
    episodes: int,
    rng: np.random.Generator,
    gamma: float = 0.9,
) -> float:
    """Mean undiscounted return of deterministic (mode) actions."""
    env = make_env(env_id, gamma=gamma)
    returns = []
    for _ in range(episodes):
        obs = env.reset(seed=int(rng.integers(2**31)))
        total = 0.0
        while True:
            action = pol.mode(pol.distribution(params, obs))[0]
            step = env.step(action)
            total += step.reward
            if step.done:
                break
            obs = step.observation
        returns.append(total)
    return float(np.mean(returns))


# ---------------------------------------------------------------------------
# Update
# ---------------------------------------------------------------------------


def _anchor_minibatch(batch: RolloutBatch, anchor: pol.PolicyParams) -> Minibatch:
    """Minibatch of an off-policy batch with π_k frozen on its states."""
    anchor_dist = pol.distribution(anchor, batch.states)
    return Minibatch.from_batch(
        batch,
        anchor_logp=pol.log_prob(anchor_dist, batch.actions),
        anchor_params=anchor_dist.stacked(),
    )


class Learner:
    """Policy and value parameters with their Adam states."""

    def __init__(self, params: pol.PolicyParams, vparams: pol.ValueParams, config: TrainConfig):
        self.params = params
        self.vparams = vparams
        self.config = config
        self.policy_opt = ad.AdamState.for_params(params.arrays, learning_rate=config.learning_rate)
        self.value_opt = ad.AdamState.for_params(vparams.arrays, learning_rate=config.value_learning_rate)

    def update(
        self,
        data: Minibatch,
        loss_fn: LossFn,
        epsilon: float,
        rng: np.random.Generator,
        iteration: int = 0,
        events: Optional[RunEventLog] = None,
    ) -> UpdateStats:
        """Epochs of shuffled minibatch steps over ``data``.

        The anchor densities in ``data`` were computed before the first step
        and stay fixed; only the live parameters move. Raises TrainingError on
        a non-finite loss.
        """
        cfg = self.config
        n_minibatches = max(1, len(data) // cfg.minibatch_size)
        anchor = data.anchor_distribution()
        snapshot_id = self.params.snapshot_id
        sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0}
        steps = excluded = epochs = 0
        mean_kl = 0.0

        for epoch in range(cfg.epochs):
            order = rng.permutation(len(data))
            for rows in np.array_split(order, n_minibatches):
                mb = data.take(rows)
                try:
                    breakdown, grads = loss_fn(self.params, mb, epsilon, cfg.entropy_coef)
                    vloss, vgrads = value_loss(self.vparams, mb)
                except (ad.AutodiffError, ObjectiveError, pol.PolicyError) as e:
                    raise TrainingError(f"Update of snapshot {snapshot_id} failed at epoch {epoch}: {e}") from e
                if not (math.isfinite(breakdown.policy_loss) and math.isfinite(vloss)):
                    raise TrainingError(
                        f"Non-finite loss at snapshot {snapshot_id}, epoch {epoch}: "
                        f"policy={breakdown.policy_loss} value={vloss}"
                    )
                arrays, self.policy_opt = ad.adam_step(self.params.arrays, grads, self.policy_opt)
                varrays, self.value_opt = ad.adam_step(self.vparams.arrays, vgrads, self.value_opt)
                try:
                    self.params = self.params.replace_arrays(arrays, snapshot_id)
                    self.vparams = self.vparams.replace_arrays(varrays)
                except pol.PolicyError as e:
                    raise TrainingError(f"Parameters diverged at snapshot {snapshot_id}: {e}") from e

                sums["policy_loss"] += breakdown.policy_loss
                sums["value_loss"] += vloss
                sums["entropy"] += breakdown.entropy
                sums["clip_fraction"] += breakdown.clip_fraction
                excluded += breakdown.excluded
                steps += 1

            epochs = epoch + 1
            mean_kl = float(np.mean(pol.kl(anchor, pol.distribution(self.params, data.states))))
            if early_stop(mean_kl, cfg.early_stop_kl) is EarlyStop.STOP:
                logger.debug(f"Early stop after epoch {epochs}: KL {mean_kl:.4g} > {cfg.early_stop_kl}")
                if events is not None:
                    events.early_stop(iteration, epochs, mean_kl)
                break

        return UpdateStats(
            policy_loss=sums["policy_loss"] / steps,
            value_loss=sums["value_loss"] / steps,
            entropy=sums["entropy"] / steps,
            kl=mean_kl,
            clip_fraction=sums["clip_fraction"] / steps,
            epochs=epochs,
            excluded=excluded,
        )

    def advance(self, snapshot_id: int) -> pol.PolicyParams:
        """Freeze the live parameters as the next snapshot."""
        self.params = self.params.replace_arrays(self.params.arrays, snapshot_id)
        return self.params


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------


def _update_dataset(
    algorithm: str,
    batch: RolloutBatch,
    policy_set: PolicySet,
    learner: Learner,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Minibatch, Optional[int]]:
    """Training samples for this iteration and the behavior snapshot used, if any."""
    params = learner.params
    if algorithm == "geppo":
        parts = []
        for entry in policy_set:
            old = revalue(entry.batch, lambda s: pol.value(learner.vparams, s))
            anchor_dist = pol.distribution(params, old.states)
            anchor_logp = pol.log_prob(anchor_dist, old.actions)
            try:
                adv, targets = vtrace(old, anchor_logp, config.gamma, config.vtrace_rho, config.vtrace_c)
            except EstimatorError as e:
                raise TrainingError(str(e)) from e
            old = normalize_advantages(old.with_estimates(adv, targets))
            parts.append(Minibatch.from_batch(old, anchor_logp, anchor_dist.stacked()))
        return Minibatch.concat(parts), None

    on_policy = Minibatch.on_policy(batch)
    if algorithm == "ppo":
        return Minibatch.concat([on_policy, on_policy]), None

    behavior = policy_set.sample_behavior(rng, params.snapshot_id)
    if behavior is None:
        return Minibatch.concat([on_policy, on_policy]), None
    return Minibatch.concat([on_policy, _anchor_minibatch(behavior.batch, params)]), behavior.snapshot_id


def _run(
    algorithm: str,
    config: TrainConfig,
    selection_enabled: bool = True,
    on_iteration: Optional[Callable[[IterationMetrics], None]] = None,
    on_selection: Optional[Callable[[SelectionRecord], None]] = None,
    events: Optional[RunEventLog] = None,
) -> RunResult:
    errors = config.validate()
    if errors:
        raise TrainingError("Invalid config: " + "; ".join(errors))

    started = time.perf_counter()
    streams = rng_streams(config.seed)
    try:
        env = make_env(config.env_id, seed=int(streams["env"].integers(2**31)), gamma=config.gamma)
    except EnvError as e:
        raise TrainingError(str(e)) from e
    spec = env.spec
    params = pol.init_policy(spec.obs_dim, spec.policy_family, spec.act_dim, streams["init"], config.hidden)
    vparams = pol.init_value(spec.obs_dim, streams["init"], config.hidden)
    learner = Learner(params, vparams, config)
    collector = Collector(env)

    capacity = 1 if algorithm == "ppo" else config.buffer_size
    policy_set = PolicySet(capacity, config.alpha, selection_enabled and algorithm == "toppo")
    schedule = EpsilonSchedule(config.epsilon_mode, config.epsilon_ppo, config.clip_epsilon)
    loss_fn: LossFn = {"toppo": toppo_loss, "ppo": ppo_loss, "geppo": geppo_loss}[algorithm]

    metrics: list[IterationMetrics] = []
    selection_log: list[SelectionRecord] = []

    def record(records: list[SelectionRecord], iteration: int) -> int:
        deleted = 0
        for rec in records:
            selection_log.append(rec)
            if on_selection is not None:
                on_selection(rec)
            if events is not None and rec.action == "evicted":
                events.policy_evicted(iteration, rec.snapshot_id)
            if rec.action == "deleted":
                deleted += 1
                if events is not None:
                    events.policy_deleted(iteration, rec.snapshot_id, rec.delta_hat)
        return deleted

    env_steps = 0
    iterations = config.iterations
    logger.info(f"{algorithm} on {config.env_id}: {iterations} iterations of {config.batch_size} steps, seed {config.seed}")
    if events is not None:
        events.run_started(algorithm, config.seed, config.env_id)

    for k in range(iterations):
        params = learner.params
        batch = collector.collect(params, learner.vparams, config.batch_size, streams["rollout"])
        env_steps += len(batch)
        if algorithm != "geppo":
            try:
                adv, targets = gae(batch, config.gamma, config.gae_lambda)
            except EstimatorError as e:
                raise TrainingError(str(e)) from e
            batch = normalize_advantages(batch.with_estimates(adv, targets))

        try:
            evictions = policy_set.insert(batch, params, k)
        except PolicySetError as e:
            raise TrainingError(str(e)) from e
        record(evictions, k)
        if events is not None:
            events.policy_inserted(k, params.snapshot_id, len(policy_set))
        buffer_size = len(policy_set)

        if algorithm == "toppo":
            epsilon = schedule.epsilon(buffer_size)
        elif algorithm == "ppo":
            epsilon = config.epsilon_ppo
        else:
            epsilon = config.clip_epsilon

        data, behavior_id = _update_dataset(algorithm, batch, policy_set, learner, config, streams["buffer"])
        stats = learner.update(data, loss_fn, epsilon, streams["shuffle"], k, events)
        new_params = learner.advance(params.snapshot_id + 1)

        deletions = record(policy_set.select(new_params, k), k)

        eval_return = None
        if (k + 1) % config.eval_interval == 0 or k == iterations - 1:
            eval_return = evaluate_policy(new_params, config.env_id, config.eval_episodes, streams["eval"], config.gamma)
            if events is not None:
                events.evaluation(k, env_steps, eval_return)

        row = IterationMetrics(
            iteration=k,
            env_steps=env_steps,
            mean_return=float(np.mean(batch.episode_returns)) if batch.episode_returns else float("nan"),
            eval_return=eval_return,
            policy_loss=stats.policy_loss,
            value_loss=stats.value_loss,
            entropy=stats.entropy,
            kl=stats.kl,
            clip_fraction=stats.clip_fraction,
            buffer_size=buffer_size,
            epsilon=epsilon,
            behavior_id=behavior_id,
            deletions=deletions,
            epochs=stats.epochs,
            excluded=stats.excluded,
        )
        metrics.append(row)
        if on_iteration is not None:
            on_iteration(row)

    wall_time = time.perf_counter() - started
    result = RunResult(algorithm, metrics, learner.params, learner.vparams, selection_log, wall_time)
    if events is not None:
        events.run_finished(iterations, env_steps, result.final_return)
    return result


def run_toppo(config: TrainConfig, selection_enabled: bool = True, **sinks) -> RunResult:
    """ToPPO: one on-policy and one sampled behavior batch per update, with selection.

    ``sinks`` are forwarded to the loop: ``on_iteration``, ``on_selection``
    and ``events``.
    """
    return _run("toppo", config, selection_enabled, **sinks)


def run_ppo(config: TrainConfig, **sinks) -> RunResult:
    """PPO at ε^PPO on the current batch only, with ToPPO's step schedule."""
    return _run("ppo", config, False, **sinks)


def run_geppo(config: TrainConfig, **sinks) -> RunResult:
    """GePPO: the last N batches replayed without selection, V-trace advantages."""
    return _run("geppo", config, False, **sinks)


RUNNERS = {"toppo": run_toppo, "ppo": run_ppo, "geppo": run_geppo}
