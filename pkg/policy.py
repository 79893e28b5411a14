"""
Policies and Value Networks
===========================

Parametric stochastic policies (categorical for discrete actions, diagonal
Gaussian with a state-independent log-std for continuous actions) and the
scalar state-value network.

Parameters live in immutable snapshots. Numpy evaluation paths serve
rollouts, selection and metrics; the ``*_tensor`` helpers build the same
computations on an autodiff tape for the losses.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

import autodiff as ad
from artifacts import atomic_write_bytes

logger = logging.getLogger(__name__)

FAMILIES = ("categorical", "gaussian")
DEFAULT_HIDDEN = (64, 64)
LOG_2PI = float(np.log(2.0 * np.pi))
SNAPSHOT_FORMAT = 1


class PolicyError(Exception):
    """Invalid policy parameters, distributions or snapshot files."""


def _frozen(arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, value in arrays.items():
        copy = np.array(value, dtype=np.float64, copy=True)
        copy.setflags(write=False)
        out[name] = copy
    return out


def _layer_names(n_layers: int) -> list[str]:
    names = []
    for i in range(n_layers):
        names += [f"w{i}", f"b{i}"]
    return names


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Immutable snapshot of a policy network.

    ``act_dim`` is the number of actions for the categorical family and the
    action dimension for the Gaussian family.
    """

    snapshot_id: int
    family: str
    obs_dim: int
    act_dim: int
    hidden: tuple[int, ...]
    arrays: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "arrays", _frozen(self.arrays))
        errors = self.validate()
        if errors:
            raise PolicyError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.family not in FAMILIES:
            errors.append(f"Unknown policy family '{self.family}'")
        if self.family == "categorical" and self.act_dim < 2:
            errors.append("Categorical policy needs at least 2 actions")
        expected = _layer_names(len(self.hidden) + 1)
        if self.family == "gaussian":
            expected.append("log_std")
        missing = [name for name in expected if name not in self.arrays]
        if missing:
            errors.append(f"Missing parameter arrays: {missing}")
        for name, value in self.arrays.items():
            if not np.all(np.isfinite(value)):
                errors.append(f"Parameter '{name}' is not finite")
        return errors

    @property
    def trainable(self) -> dict[str, np.ndarray]:
        return dict(self.arrays)

    def replace_arrays(self, arrays: Mapping[str, np.ndarray], snapshot_id: int) -> "PolicyParams":
        return PolicyParams(
            snapshot_id=snapshot_id,
            family=self.family,
            obs_dim=self.obs_dim,
            act_dim=self.act_dim,
            hidden=self.hidden,
            arrays=dict(arrays),
        )


@dataclass(frozen=True, eq=False)
class ValueParams:
    """Parameters of the scalar state-value network."""

    obs_dim: int
    hidden: tuple[int, ...]
    arrays: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "arrays", _frozen(self.arrays))

    def replace_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ValueParams":
        return ValueParams(obs_dim=self.obs_dim, hidden=self.hidden, arrays=dict(arrays))


@dataclass(frozen=True, eq=False)
class ActionDistribution:
    """A batch of per-state action distributions (one row per state)."""

    family: str
    probs: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.family == "categorical":
            if self.probs is None:
                raise PolicyError("Categorical distribution needs probabilities")
            probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
            if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-12 * probs.shape[1] + 1e-12):
                raise PolicyError("Categorical probabilities must be non-negative and sum to 1")
            object.__setattr__(self, "probs", probs)
        elif self.family == "gaussian":
            if self.mean is None or self.std is None:
                raise PolicyError("Gaussian distribution needs mean and std")
            mean = np.atleast_2d(np.asarray(self.mean, dtype=np.float64))
            std = np.broadcast_to(np.asarray(self.std, dtype=np.float64), mean.shape).copy()
            if not np.all(std > 0) or not np.all(np.isfinite(std)):
                raise PolicyError("Gaussian std must be finite and positive")
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "std", std)
        else:
            raise PolicyError(f"Unknown distribution family '{self.family}'")

    def __len__(self) -> int:
        return (self.probs if self.family == "categorical" else self.mean).shape[0]

    def stacked(self) -> np.ndarray:
        """Flat per-state parameters for storage (probs, or mean|std)."""
        if self.family == "categorical":
            return self.probs.copy()
        return np.concatenate([self.mean, self.std], axis=1)

    @classmethod
    def from_stacked(cls, family: str, stacked: np.ndarray) -> "ActionDistribution":
        stacked = np.atleast_2d(stacked)
        if family == "categorical":
            return cls(family, probs=stacked)
        half = stacked.shape[1] // 2
        return cls(family, mean=stacked[:, :half], std=stacked[:, half:])

    def take(self, rows: np.ndarray) -> "ActionDistribution":
        if self.family == "categorical":
            return ActionDistribution(self.family, probs=self.probs[rows])
        return ActionDistribution(self.family, mean=self.mean[rows], std=self.std[rows])


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _init_layers(
    sizes: list[int], rng: np.random.Generator, output_scale: float
) -> dict[str, np.ndarray]:
    arrays = {}
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        if i == n_layers - 1:
            bound *= output_scale
        arrays[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros(fan_out)
    return arrays


def init_policy(
    obs_dim: int,
    family: str,
    act_dim: int,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    snapshot_id: int = 0,
) -> PolicyParams:
    """Fan-in uniform init; the output layer is scaled down so the initial
    policy is close to uniform (categorical) or zero-mean (Gaussian)."""
    arrays = _init_layers([obs_dim, *hidden, act_dim], rng, output_scale=0.01)
    if family == "gaussian":
        arrays["log_std"] = np.zeros(act_dim)
    return PolicyParams(snapshot_id, family, obs_dim, act_dim, tuple(hidden), arrays)


def init_value(
    obs_dim: int, rng: np.random.Generator, hidden: tuple[int, ...] = DEFAULT_HIDDEN
) -> ValueParams:
    arrays = _init_layers([obs_dim, *hidden, 1], rng, output_scale=1.0)
    return ValueParams(obs_dim, tuple(hidden), arrays)


# ---------------------------------------------------------------------------
# Numpy evaluation
# ---------------------------------------------------------------------------


def mlp_forward(arrays: Mapping[str, np.ndarray], x: np.ndarray, n_hidden: int) -> np.ndarray:
    h = x
    for i in range(n_hidden):
        h = np.tanh(h @ arrays[f"w{i}"] + arrays[f"b{i}"])
    return h @ arrays[f"w{n_hidden}"] + arrays[f"b{n_hidden}"]


def _as_batch(states: np.ndarray, obs_dim: int) -> np.ndarray:
    batch = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if batch.shape[1] != obs_dim:
        raise PolicyError(f"State dimension {batch.shape[1]} != network input {obs_dim}")
    return batch


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def distribution(params: PolicyParams, states: np.ndarray) -> ActionDistribution:
    """Action distributions for a state or a batch of states."""
    batch = _as_batch(states, params.obs_dim)
    out = mlp_forward(params.arrays, batch, len(params.hidden))
    if not np.all(np.isfinite(out)):
        raise PolicyError(f"Non-finite network output for snapshot {params.snapshot_id}")
    if params.family == "categorical":
        return ActionDistribution("categorical", probs=_softmax(out))
    std = np.broadcast_to(np.exp(params.arrays["log_std"]), out.shape)
    return ActionDistribution("gaussian", mean=out, std=std)


def log_prob(dist: ActionDistribution, actions: np.ndarray) -> np.ndarray:
    """Natural-log mass (categorical) or density (Gaussian), one per row."""
    if dist.family == "categorical":
        idx = np.asarray(actions, dtype=np.int64).reshape(-1)
        if idx.shape[0] != len(dist):
            raise PolicyError("One action per state expected")
        if np.any(idx < 0) or np.any(idx >= dist.probs.shape[1]):
            raise PolicyError("Action outside the categorical support")
        with np.errstate(divide="ignore"):
            return np.log(dist.probs[np.arange(len(dist)), idx])
    acts = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if acts.shape != dist.mean.shape:
        raise PolicyError(f"Action shape {acts.shape} != distribution shape {dist.mean.shape}")
    z = (acts - dist.mean) / dist.std
    d = dist.mean.shape[1]
    return -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(dist.std), axis=1) - 0.5 * d * LOG_2PI


def entropy(dist: ActionDistribution) -> np.ndarray:
    if dist.family == "categorical":
        p = dist.probs
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(p), 0.0)
        return -terms.sum(axis=1)
    return np.sum(np.log(dist.std) + 0.5 * (LOG_2PI + 1.0), axis=1)


def _check_pair(p: ActionDistribution, q: ActionDistribution) -> None:
    if p.family != q.family:
        raise PolicyError(f"Family mismatch: {p.family} vs {q.family}")
    if len(p) != len(q):
        raise PolicyError(f"Batch size mismatch: {len(p)} vs {len(q)}")
    a = p.probs if p.family == "categorical" else p.mean
    b = q.probs if q.family == "categorical" else q.mean
    if a.shape[1] != b.shape[1]:
        raise PolicyError("Action dimension mismatch")


def kl(p: ActionDistribution, q: ActionDistribution) -> np.ndarray:
    """Exact per-row KL(p || q)."""
    _check_pair(p, q)
    if p.family == "categorical":
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p.probs > 0, p.probs * (np.log(p.probs) - np.log(q.probs)), 0.0)
        return np.maximum(terms.sum(axis=1), 0.0)
    var_p, var_q = p.std ** 2, q.std ** 2
    terms = np.log(q.std / p.std) + (var_p + (p.mean - q.mean) ** 2) / (2.0 * var_q) - 0.5
    return np.maximum(terms.sum(axis=1), 0.0)


def tv(p: ActionDistribution, q: ActionDistribution) -> np.ndarray:
    """Per-row total variation; categorical only (no closed form for Gaussians)."""
    _check_pair(p, q)
    if p.family != "categorical":
        raise PolicyError("Total variation is only available for categorical policies")
    return 0.5 * np.abs(p.probs - q.probs).sum(axis=1)


def sample(dist: ActionDistribution, rng: np.random.Generator) -> np.ndarray:
    if dist.family == "categorical":
        u = rng.random(len(dist))
        cdf = np.cumsum(dist.probs, axis=1)
        idx = (u[:, None] > cdf).sum(axis=1)
        return np.minimum(idx, dist.probs.shape[1] - 1)
    return dist.mean + dist.std * rng.standard_normal(dist.mean.shape)


def mode(dist: ActionDistribution) -> np.ndarray:
    """Deterministic action: argmax or the Gaussian mean."""
    if dist.family == "categorical":
        return np.argmax(dist.probs, axis=1)
    return dist.mean.copy()


def value(params: ValueParams, states: np.ndarray) -> np.ndarray:
    batch = _as_batch(states, params.obs_dim)
    return mlp_forward(params.arrays, batch, len(params.hidden))[:, 0]


# ---------------------------------------------------------------------------
# Tape evaluation
# ---------------------------------------------------------------------------


def mlp_tensor(p: Mapping[str, ad.Tensor], x: ad.Tensor, n_hidden: int) -> ad.Tensor:
    h = x
    for i in range(n_hidden):
        h = ad.tanh(ad.affine(h, p[f"w{i}"], p[f"b{i}"]))
    return ad.affine(h, p[f"w{n_hidden}"], p[f"b{n_hidden}"])


def log_prob_tensor(
    params: PolicyParams,
    p: Mapping[str, ad.Tensor],
    states: np.ndarray,
    actions: np.ndarray,
) -> tuple[ad.Tensor, ad.Tensor]:
    """Differentiable log-probabilities and per-row entropy on the tape of ``p``."""
    tape = next(iter(p.values())).tape
    x = tape.constant(_as_batch(states, params.obs_dim))
    out = mlp_tensor(p, x, len(params.hidden))
    if params.family == "categorical":
        lsm = ad.log_softmax(out)
        logp = ad.pick(lsm, np.asarray(actions, dtype=np.int64).reshape(-1))
        ent = -ad.sum(ad.exp(lsm) * lsm, axis=1)
        return logp, ent
    log_std = p["log_std"]
    acts = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    z = (acts - out) / ad.exp(log_std)
    d = params.act_dim
    logp = -0.5 * ad.sum(ad.square(z), axis=1) - ad.sum(log_std) - 0.5 * d * LOG_2PI
    ent = ad.sum(log_std) + 0.5 * d * (LOG_2PI + 1.0)
    return logp, ent


def value_tensor(params: ValueParams, p: Mapping[str, ad.Tensor], states: np.ndarray) -> ad.Tensor:
    tape = next(iter(p.values())).tape
    x = tape.constant(_as_batch(states, params.obs_dim))
    out = mlp_tensor(p, x, len(params.hidden))
    return ad.sum(out, axis=1)


# ---------------------------------------------------------------------------
# Snapshot files
# ---------------------------------------------------------------------------


def save_snapshot(params: PolicyParams, path: Union[str, Path]) -> None:
    """Write a snapshot: u64 header length, JSON header, float64 LE vector."""
    order = list(params.arrays)
    header = {
        "format": SNAPSHOT_FORMAT,
        "snapshot_id": params.snapshot_id,
        "family": params.family,
        "obs_dim": params.obs_dim,
        "act_dim": params.act_dim,
        "hidden": list(params.hidden),
        "order": order,
        "shapes": {name: list(params.arrays[name].shape) for name in order},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    flat = np.concatenate([params.arrays[name].reshape(-1) for name in order]).astype("<f8")
    atomic_write_bytes(Path(path), struct.pack("<Q", len(header_bytes)) + header_bytes + flat.tobytes())
    logger.debug(f"Saved snapshot {params.snapshot_id} to {path}")


def load_snapshot(path: Union[str, Path]) -> PolicyParams:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise PolicyError(f"Snapshot file {path} is truncated")
    (header_len,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PolicyError(f"Snapshot header in {path} is corrupt: {e}")
    payload = raw[8 + header_len:]
    if len(payload) % 8:
        raise PolicyError(f"Snapshot {path} is truncated mid-value")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    offset = 0
    for name in header["order"]:
        shape = tuple(header["shapes"][name])
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise PolicyError(f"Snapshot {path} has fewer values than its header declares")
        arrays[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    if offset != flat.size:
        raise PolicyError(f"Snapshot {path} has trailing data")
    return PolicyParams(
        snapshot_id=header["snapshot_id"],
        family=header["family"],
        obs_dim=header["obs_dim"],
        act_dim=header["act_dim"],
        hidden=tuple(header["hidden"]),
        arrays=arrays,
    )
