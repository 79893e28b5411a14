"""
Experiment Configuration
========================

Canonical definition of training and experiment configuration.
This is the single source of truth for hyperparameters and the config file
format (``[train]`` and ``[experiment]`` sections of ``key = value`` lines).
"""

import configparser
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Union

import numpy as np

from artifacts import atomic_write_text

logger = logging.getLogger(__name__)

VALID_ALGORITHMS = {"toppo", "ppo", "geppo"}
VALID_EPSILON_MODES = {"fixed", "adaptive"}

# Independent random streams per run; order is part of the reproducibility contract.
RNG_STREAMS = ("env", "init", "rollout", "shuffle", "buffer", "eval")


class ConfigError(Exception):
    """Invalid configuration. ``errors`` lists every offending field."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    Defaults are the continuous-control settings:
    γ=0.995, λ=0.97, 32 minibatches, 10 epochs, Adam lr 3e-4, n=1024,
    N=5, ε^ToPPO=0.1, α=0.03.
    """

    env_id: str = "cartpole"
    total_timesteps: int = 150_000
    batch_size: int = 1024
    minibatches: int = 32
    epochs: int = 10
    gamma: float = 0.995
    gae_lambda: float = 0.97
    clip_epsilon: float = 0.1
    epsilon_ppo: float = 0.2
    epsilon_mode: str = "fixed"
    buffer_size: int = 5
    alpha: float = 0.03
    learning_rate: float = 3e-4
    value_learning_rate: float = 3e-4
    entropy_coef: float = 0.0
    early_stop_kl: float = 0.03
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    eval_interval: int = 10
    eval_episodes: int = 10
    vtrace_rho: float = 1.0
    vtrace_c: float = 1.0

    def validate(self) -> list[str]:
        """Validate the config and return a list of errors (empty if valid)."""
        errors = []

        if not self.env_id:
            errors.append("train.env_id: missing")
        if self.total_timesteps <= 0:
            errors.append(f"train.total_timesteps: must be positive, got {self.total_timesteps}")
        if self.batch_size <= 0:
            errors.append(f"train.batch_size: must be positive, got {self.batch_size}")
        if self.minibatches <= 0:
            errors.append(f"train.minibatches: must be positive, got {self.minibatches}")
        elif self.batch_size > 0 and self.batch_size % self.minibatches != 0:
            errors.append(
                f"train.batch_size: {self.batch_size} is not divisible by minibatches={self.minibatches}"
            )
        if self.epochs <= 0:
            errors.append(f"train.epochs: must be positive, got {self.epochs}")
        if not 0.0 <= self.gamma < 1.0:
            errors.append(f"train.gamma: must be in [0, 1), got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            errors.append(f"train.gae_lambda: must be in [0, 1], got {self.gae_lambda}")
        if self.clip_epsilon <= 0:
            errors.append(f"train.clip_epsilon: must be positive, got {self.clip_epsilon}")
        if self.epsilon_ppo <= 0:
            errors.append(f"train.epsilon_ppo: must be positive, got {self.epsilon_ppo}")
        if self.epsilon_mode not in VALID_EPSILON_MODES:
            errors.append(
                f"train.epsilon_mode: invalid '{self.epsilon_mode}'. Must be one of: {sorted(VALID_EPSILON_MODES)}"
            )
        if self.buffer_size < 1:
            errors.append(f"train.buffer_size: must be at least 1, got {self.buffer_size}")
        if self.alpha < 0:
            errors.append(f"train.alpha: must be non-negative, got {self.alpha}")
        if self.learning_rate < 0:
            errors.append(f"train.learning_rate: must be non-negative, got {self.learning_rate}")
        if self.value_learning_rate < 0:
            errors.append(f"train.value_learning_rate: must be non-negative, got {self.value_learning_rate}")
        if self.entropy_coef < 0:
            errors.append(f"train.entropy_coef: must be non-negative, got {self.entropy_coef}")
        if not self.early_stop_kl > 0:
            errors.append(f"train.early_stop_kl: must be positive, got {self.early_stop_kl}")
        if self.seed < 0:
            errors.append(f"train.seed: must be non-negative, got {self.seed}")
        if not self.hidden or any(h <= 0 for h in self.hidden):
            errors.append(f"train.hidden: layer sizes must be positive, got {self.hidden}")
        if self.eval_interval <= 0:
            errors.append(f"train.eval_interval: must be positive, got {self.eval_interval}")
        if self.eval_episodes <= 0:
            errors.append(f"train.eval_episodes: must be positive, got {self.eval_episodes}")
        if self.vtrace_c <= 0 or self.vtrace_rho < self.vtrace_c:
            errors.append(
                f"train.vtrace_rho: need vtrace_rho >= vtrace_c > 0, got {self.vtrace_rho} and {self.vtrace_c}"
            )

        return errors

    @property
    def minibatch_size(self) -> int:
        return self.batch_size // self.minibatches

    @property
    def iterations(self) -> int:
        return self.total_timesteps // self.batch_size

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return cls(**_coerce(cls, data, "train"))


@dataclass
class ExperimentConfig:
    """A TrainConfig plus the experiment-level settings of a CLI run."""

    train: TrainConfig = field(default_factory=TrainConfig)
    algorithm: str = "toppo"
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"
    disable_selection: bool = False
    adaptive_epsilon: bool = False
    # sweep grid; empty means the single value in [train]
    buffer_sizes: tuple[int, ...] = ()
    alphas: tuple[float, ...] = ()

    def validate(self) -> list[str]:
        errors = list(self.train.validate())

        if self.algorithm not in VALID_ALGORITHMS:
            errors.append(
                f"experiment.algorithm: invalid '{self.algorithm}'. Must be one of: {sorted(VALID_ALGORITHMS)}"
            )
        if not self.seeds:
            errors.append("experiment.seeds: must contain at least one seed")
        elif any(s < 0 for s in self.seeds):
            errors.append(f"experiment.seeds: must be non-negative, got {list(self.seeds)}")
        elif len(set(self.seeds)) != len(self.seeds):
            errors.append(f"experiment.seeds: duplicate seeds in {list(self.seeds)}")
        if not self.out_dir:
            errors.append("experiment.out_dir: missing")
        if any(n < 1 for n in self.buffer_sizes):
            errors.append(f"experiment.buffer_sizes: must all be at least 1, got {list(self.buffer_sizes)}")
        elif len(set(self.buffer_sizes)) != len(self.buffer_sizes):
            errors.append(f"experiment.buffer_sizes: duplicates in {list(self.buffer_sizes)}")
        if any(not a >= 0 for a in self.alphas):
            errors.append(f"experiment.alphas: must all be non-negative, got {list(self.alphas)}")
        elif len(set(self.alphas)) != len(self.alphas):
            errors.append(f"experiment.alphas: duplicates in {list(self.alphas)}")
        if self.algorithm == "ppo" and (self.buffer_sizes or self.alphas):
            errors.append("experiment.buffer_sizes/alphas: PPO keeps a single batch, nothing to sweep")

        return errors

    def effective_train(self, seed: int) -> TrainConfig:
        """The TrainConfig of one seed with ablation flags folded in."""
        train = replace(self.train, seed=seed)
        if self.adaptive_epsilon:
            train = replace(train, epsilon_mode="adaptive")
        return train

    @property
    def is_sweep(self) -> bool:
        return bool(self.buffer_sizes or self.alphas)

    def sweep_cells(self) -> list[tuple[str, "ExperimentConfig"]]:
        """(label, config) per (N, α) cell of the grid.

        Without a grid there is one cell with an empty label. A missing axis
        falls back to the [train] value.
        """
        if not self.is_sweep:
            return [("", self)]
        cells = []
        for n in self.buffer_sizes or (self.train.buffer_size,):
            for alpha in self.alphas or (self.train.alpha,):
                train = replace(self.train, buffer_size=n, alpha=alpha)
                cells.append((f"N{n}_alpha{alpha:g}", replace(self, train=train, buffer_sizes=(), alphas=())))
        return cells

    def to_dict(self) -> dict[str, Any]:
        data = {k: v for k, v in asdict(self).items() if k != "train"}
        return {"train": self.train.to_dict(), "experiment": data}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        train = TrainConfig.from_dict(data.get("train", {}))
        values = _coerce(cls, data.get("experiment", {}), "experiment", skip={"train"})
        return cls(train=train, **values)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _parse_int_tuple(text: Union[str, tuple, list]) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(x) for x in text)
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def _parse_float_tuple(text: Union[str, tuple, list]) -> tuple[float, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(float(x) for x in text)
    return tuple(float(p) for p in text.replace(",", " ").split())


def _coerce(cls, data: dict[str, Any], section: str, skip: frozenset = frozenset()) -> dict[str, Any]:
    """Convert raw (string or typed) values to the dataclass field types.

    Unknown keys and unparseable values are collected and raised together.
    """
    types = {f.name: f.type for f in fields(cls) if f.name not in skip}
    values: dict[str, Any] = {}
    errors = []
    for key, raw in data.items():
        if key not in types:
            errors.append(f"{section}.{key}: unknown key")
            continue
        kind = types[key]
        try:
            if kind in (int, "int"):
                values[key] = int(raw)
            elif kind in (float, "float"):
                values[key] = float(raw)
            elif kind in (bool, "bool"):
                values[key] = raw if isinstance(raw, bool) else _parse_bool(str(raw))
            elif kind in (str, "str"):
                values[key] = str(raw).strip()
            elif kind in (tuple[float, ...], "tuple[float, ...]"):
                values[key] = _parse_float_tuple(raw)
            else:
                values[key] = _parse_int_tuple(raw)
        except ValueError as e:
            errors.append(f"{section}.{key}: cannot parse '{raw}' ({e})")
    if errors:
        raise ConfigError(errors)
    return values


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError([f"{source}: {e}"])

    unknown = [s for s in parser.sections() if s not in {"train", "experiment"}]
    if unknown:
        raise ConfigError([f"{source}: unknown section [{s}]" for s in unknown])

    data = {section: dict(parser.items(section)) for section in parser.sections()}
    cfg = ExperimentConfig.from_dict(data)
    errors = cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Load and validate a config file.

    Raises:
        FileNotFoundError: If the file doesn't exist
        ConfigError: If any field is invalid (all errors are reported)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    cfg = parse_config(path.read_text(), source=str(path))
    logger.debug(f"Loaded config from {path}")
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    data = cfg.to_dict()
    lines = []
    for section in ("train", "experiment"):
        lines.append(f"[{section}]")
        for key, value in data[section].items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    atomic_write_text(Path(path), dump_config(cfg))


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Named, independent generators spawned from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(RNG_STREAMS, children)}
