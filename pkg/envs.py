"""
Environments
============

Desk-scale environments used for training and for the exact oracle:

- ``cartpole``  classic Euler-integrated cart-pole, 2 discrete actions
- ``pendulum``  pendulum swing-up, 1-D continuous torque
- ``chain``     deterministic left/right chain (tabular)
- ``grid``      3x3 grid world (tabular)
- ``bias``      the 2-state left/right fixture of the V-trace bias example
- ``random:<seed>:<S>:<A>``  seeded random tabular MDP

Every environment owns its generator; ``reset(seed)`` reseeds it, so a fixed
seed and action sequence replay the same trajectory bit for bit.
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

ROW_TOLERANCE = 1e-12


class EnvError(Exception):
    """Invalid environment construction, id or action."""


@dataclass(frozen=True)
class EnvSpec:
    """Static description of an environment's interface."""

    env_id: str
    obs_dim: int
    action_kind: str  # "discrete" | "continuous"
    max_steps: int
    n_actions: int = 0
    action_low: tuple[float, ...] = ()
    action_high: tuple[float, ...] = ()
    reward_scale: str = ""

    def validate(self) -> list[str]:
        errors = []
        if self.obs_dim < 1:
            errors.append(f"{self.env_id}: observation dimension must be positive")
        if self.max_steps < 1:
            errors.append(f"{self.env_id}: max_steps must be positive")
        if self.action_kind == "discrete":
            if self.n_actions < 2:
                errors.append(f"{self.env_id}: discrete action space needs n >= 2")
        elif self.action_kind == "continuous":
            if not self.action_low or len(self.action_low) != len(self.action_high):
                errors.append(f"{self.env_id}: continuous bounds must be given per dimension")
            elif not all(math.isfinite(v) for v in (*self.action_low, *self.action_high)):
                errors.append(f"{self.env_id}: continuous bounds must be finite")
            elif any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
                errors.append(f"{self.env_id}: action_low must be below action_high")
        else:
            errors.append(f"{self.env_id}: unknown action kind '{self.action_kind}'")
        return errors

    @property
    def policy_family(self) -> str:
        return "categorical" if self.action_kind == "discrete" else "gaussian"

    @property
    def act_dim(self) -> int:
        """Categorical action count, or Gaussian action dimension."""
        return self.n_actions if self.action_kind == "discrete" else len(self.action_low)


class Step(NamedTuple):
    observation: np.ndarray
    reward: float
    done: bool
    truncated: bool  # done because of the horizon, not a true termination


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Explicit finite MDP: P [S, A, S], R [S, A], discount, initial distribution."""

    P: np.ndarray
    R: np.ndarray
    gamma: float
    rho0: np.ndarray
    name: str = "tabular"

    def __post_init__(self) -> None:
        for attr in ("P", "R", "rho0"):
            value = np.array(getattr(self, attr), dtype=np.float64, copy=True)
            value.setflags(write=False)
            object.__setattr__(self, attr, value)
        errors = self.validate()
        if errors:
            raise EnvError("; ".join(errors))

    @property
    def S(self) -> int:
        return self.P.shape[0]

    @property
    def A(self) -> int:
        return self.P.shape[1]

    def validate(self) -> list[str]:
        errors = []
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            return [f"{self.name}: P must have shape [S, A, S], got {self.P.shape}"]
        S, A = self.P.shape[:2]
        if self.R.shape != (S, A):
            errors.append(f"{self.name}: R must have shape {(S, A)}, got {self.R.shape}")
        if self.rho0.shape != (S,):
            errors.append(f"{self.name}: rho0 must have shape {(S,)}, got {self.rho0.shape}")
        if np.any(self.P < 0) or np.any(np.abs(self.P.sum(axis=2) - 1.0) > ROW_TOLERANCE * S):
            errors.append(f"{self.name}: every P[s, a, :] must be a probability vector")
        if self.rho0.shape == (S,) and (
            np.any(self.rho0 < 0) or abs(self.rho0.sum() - 1.0) > ROW_TOLERANCE * S
        ):
            errors.append(f"{self.name}: rho0 must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            errors.append(f"{self.name}: gamma must be in [0, 1), got {self.gamma}")
        if not np.all(np.isfinite(self.R)):
            errors.append(f"{self.name}: rewards must be finite")
        return errors


# ---------------------------------------------------------------------------
# Simulators
# ---------------------------------------------------------------------------


class Env:
    """Base class: owns a generator, counts steps, enforces the horizon."""

    spec: EnvSpec

    def __init__(self, seed: Optional[int] = None):
        self.rng = np.random.default_rng(seed)
        self.steps = 0
        self._needs_reset = True

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.steps = 0
        self._needs_reset = False
        return self._reset()

    def step(self, action) -> Step:
        if self._needs_reset:
            raise EnvError(f"{self.spec.env_id}: step() called before reset() or after done")
        observation, reward, terminated = self._step(self._check_action(action))
        self.steps += 1
        truncated = not terminated and self.steps >= self.spec.max_steps
        done = terminated or truncated
        if done:
            self._needs_reset = True
        return Step(observation, float(reward), done, truncated)

    def _check_action(self, action):
        if self.spec.action_kind == "discrete":
            try:
                index = int(np.asarray(action).reshape(()))
            except (TypeError, ValueError):
                raise EnvError(f"{self.spec.env_id}: discrete action must be a scalar, got {action!r}")
            if not 0 <= index < self.spec.n_actions:
                raise EnvError(f"{self.spec.env_id}: action {index} outside [0, {self.spec.n_actions})")
            return index
        u = np.asarray(action, dtype=np.float64).reshape(-1)
        if u.shape != (len(self.spec.action_low),):
            raise EnvError(f"{self.spec.env_id}: action shape {u.shape} != ({len(self.spec.action_low)},)")
        if not np.all(np.isfinite(u)):
            raise EnvError(f"{self.spec.env_id}: non-finite action {u}")
        # unbounded Gaussian samples are applied at the actuator limits
        return np.clip(u, self.spec.action_low, self.spec.action_high)

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, action) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError


class CartPole(Env):
    """Cart-pole balancing with Euler integration at 50 Hz.

    Reward +1 per step (including the terminating step); terminates when the
    pole leaves ±12 degrees or the cart leaves ±2.4; horizon 500.
    """

    GRAVITY = 9.8
    MASS_CART = 1.0
    MASS_POLE = 0.1
    HALF_LENGTH = 0.5
    FORCE = 10.0
    TAU = 0.02
    THETA_LIMIT = 12.0 * 2.0 * math.pi / 360.0
    X_LIMIT = 2.4

    spec = EnvSpec(
        env_id="cartpole",
        obs_dim=4,
        action_kind="discrete",
        n_actions=2,
        max_steps=500,
        reward_scale="+1 per step, max 500",
    )

    def _reset(self) -> np.ndarray:
        self.state = self.rng.uniform(-0.05, 0.05, size=4)
        return self.state.copy()

    def _step(self, action: int) -> tuple[np.ndarray, float, bool]:
        x, x_dot, theta, theta_dot = self.state
        force = self.FORCE if action == 1 else -self.FORCE
        total_mass = self.MASS_CART + self.MASS_POLE
        pole_moment = self.MASS_POLE * self.HALF_LENGTH
        cos_t, sin_t = math.cos(theta), math.sin(theta)

        temp = (force + pole_moment * theta_dot ** 2 * sin_t) / total_mass
        theta_acc = (self.GRAVITY * sin_t - cos_t * temp) / (
            self.HALF_LENGTH * (4.0 / 3.0 - self.MASS_POLE * cos_t ** 2 / total_mass)
        )
        x_acc = temp - pole_moment * theta_acc * cos_t / total_mass

        x = x + self.TAU * x_dot
        x_dot = x_dot + self.TAU * x_acc
        theta = theta + self.TAU * theta_dot
        theta_dot = theta_dot + self.TAU * theta_acc
        self.state = np.array([x, x_dot, theta, theta_dot])

        terminated = abs(x) > self.X_LIMIT or abs(theta) > self.THETA_LIMIT
        return self.state.copy(), 1.0, bool(terminated)


def _angle_normalize(theta: float) -> float:
    return ((theta + math.pi) % (2.0 * math.pi)) - math.pi


class Pendulum(Env):
    """Pendulum swing-up; θ=0 is upright. Never terminates, horizon 200."""

    GRAVITY = 10.0
    MASS = 1.0
    LENGTH = 1.0
    DT = 0.05
    MAX_SPEED = 8.0
    MAX_TORQUE = 2.0

    spec = EnvSpec(
        env_id="pendulum",
        obs_dim=3,
        action_kind="continuous",
        action_low=(-2.0,),
        action_high=(2.0,),
        max_steps=200,
        reward_scale="-(θ² + 0.1·θ̇² + 0.001·u²) per step, in [-16.3, 0]",
    )

    def _reset(self) -> np.ndarray:
        self.theta = float(self.rng.uniform(-math.pi, math.pi))
        self.theta_dot = float(self.rng.uniform(-1.0, 1.0))
        return self._observation()

    def set_state(self, theta: float, theta_dot: float) -> np.ndarray:
        self.theta, self.theta_dot = float(theta), float(theta_dot)
        return self._observation()

    def _observation(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def _step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        u = float(action[0])
        th, th_dot = self.theta, self.theta_dot
        cost = _angle_normalize(th) ** 2 + 0.1 * th_dot ** 2 + 0.001 * u ** 2

        g, m, l = self.GRAVITY, self.MASS, self.LENGTH
        new_th_dot = th_dot + (3.0 * g / (2.0 * l) * math.sin(th) + 3.0 / (m * l ** 2) * u) * self.DT
        new_th_dot = min(max(new_th_dot, -self.MAX_SPEED), self.MAX_SPEED)
        self.theta = th + new_th_dot * self.DT
        self.theta_dot = new_th_dot
        return self._observation(), -cost, False


class TabularEnv(Env):
    """Simulator for a TabularMDP with one-hot observations.

    Tabular MDPs have no terminal states; episodes end at the horizon.
    """

    def __init__(self, mdp: TabularMDP, horizon: int = 200, seed: Optional[int] = None, env_id: Optional[str] = None):
        super().__init__(seed)
        self.mdp = mdp
        self.spec = EnvSpec(
            env_id=env_id or mdp.name,
            obs_dim=mdp.S,
            action_kind="discrete",
            n_actions=mdp.A,
            max_steps=horizon,
            reward_scale=f"R in [{mdp.R.min():.3g}, {mdp.R.max():.3g}]",
        )
        errors = self.spec.validate()
        if errors:
            raise EnvError("; ".join(errors))
        self.state = 0

    def _one_hot(self, s: int) -> np.ndarray:
        obs = np.zeros(self.mdp.S)
        obs[s] = 1.0
        return obs

    def _reset(self) -> np.ndarray:
        self.state = int(self.rng.choice(self.mdp.S, p=self.mdp.rho0))
        return self._one_hot(self.state)

    def _step(self, action: int) -> tuple[np.ndarray, float, bool]:
        reward = self.mdp.R[self.state, action]
        self.state = int(self.rng.choice(self.mdp.S, p=self.mdp.P[self.state, action]))
        return self._one_hot(self.state), float(reward), False


# ---------------------------------------------------------------------------
# Tabular MDP constructors
# ---------------------------------------------------------------------------

LEFT, RIGHT = 0, 1


def chain_mdp(n_states: int = 5, gamma: float = 0.9) -> TabularMDP:
    """Deterministic chain; "right" at the last state pays 1, everything else 0."""
    if n_states < 2:
        raise EnvError(f"chain needs at least 2 states, got {n_states}")
    P = np.zeros((n_states, 2, n_states))
    R = np.zeros((n_states, 2))
    for s in range(n_states):
        P[s, LEFT, max(s - 1, 0)] = 1.0
        P[s, RIGHT, min(s + 1, n_states - 1)] = 1.0
    R[n_states - 1, RIGHT] = 1.0
    rho0 = np.zeros(n_states)
    rho0[0] = 1.0
    return TabularMDP(P, R, gamma, rho0, name="chain")


def grid_mdp(size: int = 3, gamma: float = 0.9, slip: float = 0.1) -> TabularMDP:
    """Grid world with actions up/down/left/right that slip to a random move.

    Acting in the bottom-right goal cell pays 1 and teleports to the start
    corner.
    """
    if size < 2:
        raise EnvError(f"grid needs size >= 2, got {size}")
    if not 0.0 <= slip < 1.0:
        raise EnvError(f"grid slip must be in [0, 1), got {slip}")
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    S, A = size * size, len(moves)
    goal = S - 1

    def target(s: int, move: tuple[int, int]) -> int:
        r, c = divmod(s, size)
        r = min(max(r + move[0], 0), size - 1)
        c = min(max(c + move[1], 0), size - 1)
        return r * size + c

    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            if s == goal:
                P[s, a, 0] = 1.0
                R[s, a] = 1.0
                continue
            P[s, a, target(s, moves[a])] += 1.0 - slip
            for move in moves:
                P[s, a, target(s, move)] += slip / A
    rho0 = np.zeros(S)
    rho0[0] = 1.0
    return TabularMDP(P, R, gamma, rho0, name="grid")


def vtrace_bias_mdp(gamma: float = 0.9) -> TabularMDP:
    """Two states, actions left/right: left leads to state 0 and pays 1,
    right leads to state 1 and pays 0; uniform initial state."""
    P = np.zeros((2, 2, 2))
    P[:, LEFT, 0] = 1.0
    P[:, RIGHT, 1] = 1.0
    R = np.zeros((2, 2))
    R[:, LEFT] = 1.0
    return TabularMDP(P, R, gamma, np.full(2, 0.5), name="bias")


def _positive_rows(rng: np.random.Generator, shape: tuple[int, ...], sparsity: float) -> np.ndarray:
    """Dirichlet(1) rows via normalized exponentials, optionally sparsified.

    Each row keeps at least its largest draw.
    """
    draws = rng.exponential(1.0, size=shape)
    if sparsity > 0:
        keep = rng.random(shape) >= sparsity
        largest = draws.argmax(axis=-1)[..., None]
        np.put_along_axis(keep, largest, True, axis=-1)
        draws = np.where(keep, draws, 0.0)
    return draws / draws.sum(axis=-1, keepdims=True)


def random_mdp(seed: int, S: int, A: int, gamma: float = 0.9, sparsity: float = 0.0) -> TabularMDP:
    """Seeded random MDP: Dirichlet transition rows, rewards uniform in [-1, 1]."""
    if S < 2 or A < 2:
        raise EnvError(f"random MDP needs S >= 2 and A >= 2, got S={S}, A={A}")
    if not 0.0 <= sparsity < 1.0:
        raise EnvError(f"sparsity must be in [0, 1), got {sparsity}")
    rng = np.random.default_rng(seed)
    P = _positive_rows(rng, (S, A, S), sparsity)
    R = rng.uniform(-1.0, 1.0, size=(S, A))
    rho0 = _positive_rows(rng, (S,), 0.0)
    return TabularMDP(P, R, gamma, rho0, name=f"random:{seed}:{S}:{A}")


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

TABULAR_IDS = {"chain": chain_mdp, "grid": grid_mdp, "bias": vtrace_bias_mdp}
KNOWN_IDS = ("cartpole", "pendulum", "chain", "grid", "bias", "random:<seed>:<S>:<A>")


def parse_random_id(env_id: str) -> tuple[int, int, int]:
    parts = env_id.split(":")
    if len(parts) != 4 or parts[0] != "random":
        raise EnvError(f"Unknown environment id '{env_id}'. Expected random:<seed>:<S>:<A>")
    try:
        seed, S, A = (int(p) for p in parts[1:])
    except ValueError:
        raise EnvError(f"Unknown environment id '{env_id}'. Seed, S and A must be integers")
    return seed, S, A


def make_mdp(env_id: str, gamma: float = 0.9) -> TabularMDP:
    if env_id in TABULAR_IDS:
        return TABULAR_IDS[env_id](gamma=gamma)
    if env_id.startswith("random:"):
        seed, S, A = parse_random_id(env_id)
        return random_mdp(seed, S, A, gamma)
    raise EnvError(f"Environment id '{env_id}' is not tabular. Known tabular ids: chain, grid, bias, random:<seed>:<S>:<A>")


def make_env(env_id: str, seed: Optional[int] = None, gamma: float = 0.9, horizon: int = 200) -> Union[CartPole, Pendulum, TabularEnv]:
    """Build an environment from its string id.

    ``gamma`` and ``horizon`` only matter for tabular ids.
    """
    if env_id == "cartpole":
        return CartPole(seed)
    if env_id == "pendulum":
        return Pendulum(seed)
    try:
        mdp = make_mdp(env_id, gamma)
    except EnvError:
        if env_id.startswith("random:"):
            raise
        raise EnvError(f"Unknown environment id '{env_id}'. Known ids: {', '.join(KNOWN_IDS)}")
    logger.debug(f"Built tabular env '{env_id}' with S={mdp.S}, A={mdp.A}")
    return TabularEnv(mdp, horizon=horizon, seed=seed, env_id=env_id)
