"""
Tabular Oracle
==============

Exact dynamic-programming ground truth on small TabularMDPs.

Everything here is a pure function of (mdp, policies): exact values,
visitation distributions, the performance-difference identity, the two
policy-improvement lower bounds, the monotonic-improvement condition, the
V-trace fixed point, the PPO value-improvement check and the two auxiliary
shift bounds. Linear systems are solved directly (LU with partial pivoting),
so the oracle is limited to S·A ≤ 64.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

import policy as pol
from envs import TabularMDP, random_mdp

logger = logging.getLogger(__name__)

MAX_TABLE_SIZE = 64
RESIDUAL_TOLERANCE = 1e-10
BOUND_TOLERANCE = 1e-9
VALUE_TOLERANCE = 1e-10
HYPOTHESIS_TOLERANCE = 1e-12


class OracleError(Exception):
    """Invalid oracle input or an internal numerical failure."""


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Action probabilities, one row per state."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=np.float64, copy=True)
        if probs.ndim != 2:
            raise OracleError(f"Tabular policy must be [S, A], got shape {probs.shape}")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-12 * probs.shape[1] + 1e-12):
            raise OracleError("Every policy row must be non-negative and sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def S(self) -> int:
        return self.probs.shape[0]

    @property
    def A(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, S: int, A: int) -> "TabularPolicy":
        return cls(np.full((S, A), 1.0 / A))

    @classmethod
    def greedy(cls, scores: np.ndarray) -> "TabularPolicy":
        """Deterministic argmax policy (first maximizer on ties)."""
        probs = np.zeros_like(scores, dtype=np.float64)
        probs[np.arange(scores.shape[0]), np.argmax(scores, axis=1)] = 1.0
        return cls(probs)

    @classmethod
    def mixture(cls, a: "TabularPolicy", b: "TabularPolicy", weight: float) -> "TabularPolicy":
        """(1 - weight)·a + weight·b, renormalized against rounding."""
        probs = (1.0 - weight) * a.probs + weight * b.probs
        return cls(probs / probs.sum(axis=1, keepdims=True))

    def as_distribution(self) -> pol.ActionDistribution:
        return pol.ActionDistribution("categorical", probs=self.probs)


def random_policy(rng: np.random.Generator, S: int, A: int, sparsity: float = 0.0) -> TabularPolicy:
    """Dirichlet(1) rows; with ``sparsity`` each entry is dropped with that
    probability, keeping at least one action per state."""
    draws = rng.exponential(1.0, size=(S, A))
    if sparsity > 0:
        keep = rng.random((S, A)) >= sparsity
        keep[np.arange(S), draws.argmax(axis=1)] = True
        draws = np.where(keep, draws, 0.0)
    return TabularPolicy(draws / draws.sum(axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class ExactEvaluation:
    V: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    rho: np.ndarray
    eta: float
    residual: float


@dataclass(frozen=True)
class BoundReport:
    """Both sides of a policy-improvement lower bound with every ingredient.

    ``delta`` is the visitation-averaged TV term, ``delta_max`` the
    worst-state TV paired with it, ``delta_max_anchor`` the worst-state TV
    between behavior and current policy (zero for the single-policy bound).
    """

    name: str
    lhs: float
    surrogate: float
    penalty_shift: float
    penalty_product: float
    epsilon: float
    delta: float
    delta_max: float
    delta_max_anchor: float
    rhs: float
    satisfied: bool

    @property
    def margin(self) -> float:
        return self.lhs - self.rhs

    def as_row(self, prefix: str) -> dict[str, float]:
        data = asdict(self)
        data.pop("name")
        return {f"{prefix}_{key}": value for key, value in data.items()}


@dataclass(frozen=True)
class InequalityCheck:
    name: str
    lhs: float
    rhs: float

    @property
    def satisfied(self) -> bool:
        return self.lhs <= self.rhs + BOUND_TOLERANCE


class PerformanceDifference(NamedTuple):
    lhs: float  # η(π̂) − η(π)
    rhs: float  # advantage expectation under π̂'s visitation

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)


@dataclass(frozen=True)
class ValueImprovement:
    hypothesis: float
    value_before: float
    value_after: float

    @property
    def holds(self) -> bool:
        return self.value_after >= self.value_before - VALUE_TOLERANCE


@dataclass(frozen=True)
class CandidateStatus:
    alpha: float
    condition: float
    passed: bool


@dataclass(frozen=True, eq=False)
class ImprovementReport:
    objective: float
    next_policy: TabularPolicy
    optimizer_ok: bool
    method: str
    candidates: list[CandidateStatus] = field(default_factory=list)

    @property
    def largest_passing_alpha(self) -> Optional[float]:
        passing = [c.alpha for c in self.candidates if c.passed]
        return max(passing) if passing else None


class MonteCarloEstimate(NamedTuple):
    mean: float
    standard_error: float
    episodes: int


# ---------------------------------------------------------------------------
# Exact evaluation
# ---------------------------------------------------------------------------


def _check_shapes(mdp: TabularMDP, *policies: TabularPolicy) -> None:
    if mdp.S * mdp.A > MAX_TABLE_SIZE:
        raise OracleError(f"Oracle limited to S·A <= {MAX_TABLE_SIZE}, got {mdp.S}·{mdp.A}")
    for p in policies:
        if p.probs.shape != (mdp.S, mdp.A):
            raise OracleError(f"Policy shape {p.probs.shape} does not match MDP ({mdp.S}, {mdp.A})")


def evaluate(mdp: TabularMDP, pi: TabularPolicy) -> ExactEvaluation:
    """V, Q, A, normalized discounted visitation and η of ``pi`` by direct solves."""
    _check_shapes(mdp, pi)
    gamma = mdp.gamma
    P_pi = np.einsum("sa,sat->st", pi.probs, mdp.P)
    r_pi = np.sum(pi.probs * mdp.R, axis=1)
    system = np.eye(mdp.S) - gamma * P_pi

    try:
        V = np.linalg.solve(system, r_pi)
        rho = np.linalg.solve(system.T, (1.0 - gamma) * mdp.rho0)
    except np.linalg.LinAlgError as e:
        raise OracleError(f"Bellman system is singular for {mdp.name}: {e}")

    residual = float(np.max(np.abs(system @ V - r_pi)))
    if residual >= RESIDUAL_TOLERANCE:
        raise OracleError(f"Bellman residual {residual:.3e} exceeds {RESIDUAL_TOLERANCE}")
    if abs(rho.sum() - 1.0) > RESIDUAL_TOLERANCE:
        raise OracleError(f"Visitation does not normalize: sum={rho.sum()!r}")

    Q = mdp.R + gamma * np.einsum("sat,t->sa", mdp.P, V)
    return ExactEvaluation(
        V=V,
        Q=Q,
        A=Q - V[:, None],
        rho=rho,
        eta=float(mdp.rho0 @ V),
        residual=residual,
    )


def performance_difference(mdp: TabularMDP, pi_hat: TabularPolicy, pi: TabularPolicy) -> PerformanceDifference:
    """η(π̂) − η(π) against (1/(1−γ))·E_{s∼ρ^π̂, a∼π̂}[A^π(s, a)]."""
    ev_hat = evaluate(mdp, pi_hat)
    ev = evaluate(mdp, pi)
    expected = ev_hat.rho @ np.sum(pi_hat.probs * ev.A, axis=1)
    return PerformanceDifference(ev_hat.eta - ev.eta, float(expected / (1.0 - mdp.gamma)))


def tv_per_state(p: TabularPolicy, q: TabularPolicy) -> np.ndarray:
    return pol.tv(p.as_distribution(), q.as_distribution())


def _require_coverage(pi: TabularPolicy, mu: TabularPolicy) -> None:
    uncovered = (pi.probs > 0) & (mu.probs == 0)
    if np.any(uncovered):
        s, a = np.argwhere(uncovered)[0]
        raise OracleError(f"Importance ratio undefined: mu({a}|{s}) = 0 while pi({a}|{s}) > 0")


def _surrogate(mdp: TabularMDP, pi: TabularPolicy, rho_mu: np.ndarray, advantages: np.ndarray) -> float:
    """(1/(1−γ))·E_{s∼ρ^μ, a∼μ}[(π/μ)·A]; the ratio cancels the behavior probability."""
    return float(rho_mu @ np.sum(pi.probs * advantages, axis=1) / (1.0 - mdp.gamma))


# ---------------------------------------------------------------------------
# Lower bounds
# ---------------------------------------------------------------------------


def lemma21_bound(mdp: TabularMDP, pi_k: TabularPolicy, pi: TabularPolicy, mu: TabularPolicy) -> BoundReport:
    """Improvement lower bound with current-policy advantages under behavior data.

    rhs = L − (4εγ/(1−γ)²)·max_s TV(π_k, π)·E_{ρ^μ}TV(μ, π), ε = max|A^{π_k}|.
    """
    _check_shapes(mdp, pi_k, pi, mu)
    _require_coverage(pi, mu)
    ev_k = evaluate(mdp, pi_k)
    ev_pi = evaluate(mdp, pi)
    ev_mu = evaluate(mdp, mu)
    gamma = mdp.gamma

    epsilon = float(np.max(np.abs(ev_k.A)))
    delta = float(ev_mu.rho @ tv_per_state(mu, pi))
    delta_max = float(np.max(tv_per_state(pi_k, pi)))
    surrogate = _surrogate(mdp, pi, ev_mu.rho, ev_k.A)
    penalty = 4.0 * epsilon * gamma / (1.0 - gamma) ** 2 * delta_max * delta
    lhs = ev_pi.eta - ev_k.eta
    rhs = surrogate - penalty
    return BoundReport(
        name="policy_improvement",
        lhs=lhs,
        surrogate=surrogate,
        penalty_shift=0.0,
        penalty_product=penalty,
        epsilon=epsilon,
        delta=delta,
        delta_max=delta_max,
        delta_max_anchor=0.0,
        rhs=rhs,
        satisfied=lhs >= rhs - BOUND_TOLERANCE,
    )


def _behavior_bound_terms(
    mdp: TabularMDP, pi_k: TabularPolicy, pi: TabularPolicy, mu: TabularPolicy, ev_mu: ExactEvaluation
) -> tuple[float, float, float, float, float, float, float]:
    gamma = mdp.gamma
    epsilon = float(np.max(np.abs(ev_mu.A)))
    delta = float(ev_mu.rho @ tv_per_state(mu, pi))
    delta_max = float(np.max(tv_per_state(mu, pi)))
    delta_max_anchor = float(np.max(tv_per_state(mu, pi_k)))
    surrogate = _surrogate(mdp, pi, ev_mu.rho, ev_mu.A)
    shift = 2.0 * (1.0 + gamma) * epsilon / (1.0 - gamma) ** 2 * delta_max_anchor
    product = 4.0 * epsilon * gamma / (1.0 - gamma) ** 2 * delta_max * delta
    return surrogate, shift, product, epsilon, delta, delta_max, delta_max_anchor


def lemma31_bound(mdp: TabularMDP, pi_k: TabularPolicy, pi: TabularPolicy, mu: TabularPolicy) -> BoundReport:
    """Improvement lower bound with behavior-policy advantages A^μ.

    rhs = L_μ(π) − (2(1+γ)ε/(1−γ)²)·max_s TV(μ, π_k)
                 − (4εγ/(1−γ)²)·max_s TV(μ, π)·E_{ρ^μ}TV(μ, π),  ε = max|A^μ|.
    """
    _check_shapes(mdp, pi_k, pi, mu)
    _require_coverage(pi, mu)
    ev_k = evaluate(mdp, pi_k)
    ev_pi = evaluate(mdp, pi)
    ev_mu = evaluate(mdp, mu)
    surrogate, shift, product, epsilon, delta, delta_max, delta_max_anchor = _behavior_bound_terms(
        mdp, pi_k, pi, mu, ev_mu
    )
    lhs = ev_pi.eta - ev_k.eta
    rhs = surrogate - shift - product
    return BoundReport(
        name="behavior_improvement",
        lhs=lhs,
        surrogate=surrogate,
        penalty_shift=shift,
        penalty_product=product,
        epsilon=epsilon,
        delta=delta,
        delta_max=delta_max,
        delta_max_anchor=delta_max_anchor,
        rhs=rhs,
        satisfied=lhs >= rhs - BOUND_TOLERANCE,
    )


# ---------------------------------------------------------------------------
# Monotonic improvement
# ---------------------------------------------------------------------------


def project_simplex(rows: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row onto the probability simplex."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    n = rows.shape[1]
    u = -np.sort(-rows, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, n + 1)
    cond = u - css / idx > 0
    k = n - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(rows.shape[0]), k - 1] / k
    projected = np.maximum(rows - theta[:, None], 0.0)
    return projected / projected.sum(axis=1, keepdims=True)


class _TrustObjective:
    """F(π) = L_{π_k}(π) − (4εγ/(1−γ)²)·max_s TV(π_k, π)·E_{ρ^{π_k}}TV(π_k, π)."""

    def __init__(self, mdp: TabularMDP, pi_k: TabularPolicy):
        self.mdp = mdp
        self.pi_k = pi_k
        ev = evaluate(mdp, pi_k)
        self.advantages = ev.A
        self.rho = ev.rho
        self.epsilon = float(np.max(np.abs(ev.A)))
        self.coef = 4.0 * self.epsilon * mdp.gamma / (1.0 - mdp.gamma) ** 2

    def value(self, probs: np.ndarray) -> float:
        tv = 0.5 * np.abs(probs - self.pi_k.probs).sum(axis=1)
        surrogate = self.rho @ np.sum(probs * self.advantages, axis=1) / (1.0 - self.mdp.gamma)
        return float(surrogate - self.coef * tv.max() * (self.rho @ tv))

    def subgradient(self, probs: np.ndarray) -> np.ndarray:
        diff = probs - self.pi_k.probs
        sign = 0.5 * np.sign(diff)
        tv = 0.5 * np.abs(diff).sum(axis=1)
        worst = int(np.argmax(tv))
        grad = self.rho[:, None] * self.advantages / (1.0 - self.mdp.gamma)
        grad_mean_tv = self.rho[:, None] * sign
        grad_max_tv = np.zeros_like(probs)
        grad_max_tv[worst] = sign[worst]
        return grad - self.coef * (grad_max_tv * (self.rho @ tv) + tv.max() * grad_mean_tv)


def maximize_trust_objective(
    mdp: TabularMDP, pi_k: TabularPolicy, iterations: int = 500, step: float = 0.1
) -> tuple[TabularPolicy, float, bool, str]:
    """Projected subgradient ascent on F from π_k, keeping the best iterate.

    When ascent never reaches F > 0 a restart runs a halving line search
    along the projected surrogate-gradient direction from π_k.
    """
    objective = _TrustObjective(mdp, pi_k)
    probs = pi_k.probs.copy()
    best_probs, best_value = probs, objective.value(probs)
    for _ in range(iterations):
        probs = project_simplex(probs + step * objective.subgradient(probs))
        f = objective.value(probs)
        if f > best_value:
            best_probs, best_value = probs, f

    method = "ascent"
    if best_value <= 0:
        method = "line_search"
        direction = project_simplex(pi_k.probs + step * objective.subgradient(pi_k.probs)) - pi_k.probs
        scale = 1.0
        for _ in range(60):
            candidate = project_simplex(pi_k.probs + scale * direction)
            f = objective.value(candidate)
            if f > best_value:
                best_probs, best_value = candidate, f
            if f > 0:
                break
            scale *= 0.5
    ok = best_value > 0
    if not ok:
        logger.debug(f"Trust objective not positive on {mdp.name}: best F={best_value:.3e}")
    return TabularPolicy(best_probs), best_value, ok, method


def improvement_condition(
    mdp: TabularMDP, pi_k: TabularPolicy, pi_next: TabularPolicy, mu: TabularPolicy
) -> float:
    """L_μ(π_{k+1}) minus both behavior penalties; positive means the step improves."""
    _check_shapes(mdp, pi_k, pi_next, mu)
    _require_coverage(pi_next, mu)
    surrogate, shift, product, *_ = _behavior_bound_terms(mdp, pi_k, pi_next, mu, evaluate(mdp, mu))
    return surrogate - shift - product


def monotonic_improvement_check(
    mdp: TabularMDP,
    pi_k: TabularPolicy,
    candidates: Sequence[TabularPolicy],
    iterations: int = 500,
    step: float = 0.1,
) -> ImprovementReport:
    """Maximize F over tabular policies, then test the improvement condition
    for every candidate behavior policy μ and record α = E_{ρ^μ}TV(μ, π_k)."""
    pi_next, f_value, ok, method = maximize_trust_objective(mdp, pi_k, iterations, step)
    statuses = []
    for mu in candidates:
        alpha = float(evaluate(mdp, mu).rho @ tv_per_state(mu, pi_k))
        condition = improvement_condition(mdp, pi_k, pi_next, mu)
        statuses.append(CandidateStatus(alpha=alpha, condition=condition, passed=condition > 0))
    return ImprovementReport(
        objective=f_value, next_policy=pi_next, optimizer_ok=ok, method=method, candidates=statuses
    )


def candidate_ring(
    pi_k: TabularPolicy, rng: np.random.Generator, weights: Iterable[float], per_weight: int = 4
) -> list[TabularPolicy]:
    """Behavior policies on mixtures (1−w)·π_k + w·ν toward random full-support ν."""
    out = []
    for w in weights:
        for _ in range(per_weight):
            nu = random_policy(rng, pi_k.S, pi_k.A)
            out.append(TabularPolicy.mixture(pi_k, nu, w))
    return out


# ---------------------------------------------------------------------------
# V-trace fixed point
# ---------------------------------------------------------------------------


def vtrace_fixed_point(
    mdp: TabularMDP, pi: TabularPolicy, mu: TabularPolicy, rho_bar: float, c_bar: float = 1.0
) -> tuple[TabularPolicy, np.ndarray]:
    """The truncated-IS policy π_ρ̄ ∝ min(ρ̄·μ, π) and its exact value.

    ``c_bar`` changes the contraction rate of the recursion, not its fixed point.
    """
    if not (c_bar > 0 and rho_bar >= c_bar):
        raise OracleError(f"Need rho_bar >= c_bar > 0, got rho_bar={rho_bar}, c_bar={c_bar}")
    _check_shapes(mdp, pi, mu)
    with np.errstate(invalid="ignore", over="ignore"):
        scaled = np.where(mu.probs > 0, rho_bar * mu.probs, 0.0)
    weights = np.minimum(scaled, pi.probs)
    norm = weights.sum(axis=1, keepdims=True)
    if np.any(norm <= 0):
        s = int(np.argmax(norm[:, 0] <= 0))
        raise OracleError(f"pi and mu have disjoint support at state {s}; truncated policy undefined")
    biased = TabularPolicy(weights / norm)
    return biased, evaluate(mdp, biased).V


# ---------------------------------------------------------------------------
# PPO value improvement
# ---------------------------------------------------------------------------


def ppo_value_improvement(mdp: TabularMDP, pi_k: TabularPolicy, pi_next: TabularPolicy) -> ValueImprovement:
    """Exact hypothesis E_{ρ^{π_k}, π_{k+1}}[A^{π_k}] and both visitation-weighted values."""
    ev_k = evaluate(mdp, pi_k)
    ev_next = evaluate(mdp, pi_next)
    hypothesis = float(ev_k.rho @ np.sum(pi_next.probs * ev_k.A, axis=1))
    return ValueImprovement(
        hypothesis=hypothesis,
        value_before=float(ev_k.rho @ ev_k.V),
        value_after=float(ev_k.rho @ ev_next.V),
    )


def ppo_value_improvement_check(mdp: TabularMDP, pi_k: TabularPolicy, pi_next: TabularPolicy) -> bool:
    """Whether E_{ρ^{π_k}}V^{π_{k+1}} ≥ E_{ρ^{π_k}}V^{π_k}, given the hypothesis holds.

    Raises:
        OracleError: If the hypothesis E_{ρ^{π_k}, π_{k+1}}[A^{π_k}] ≥ 0 fails
    """
    report = ppo_value_improvement(mdp, pi_k, pi_next)
    if report.hypothesis < -HYPOTHESIS_TOLERANCE:
        raise OracleError(f"Hypothesis violated: expected advantage {report.hypothesis:.3e} < 0")
    return report.holds


def clipped_surrogate_step(
    mdp: TabularMDP,
    pi_k: TabularPolicy,
    epsilon: float,
    advantages: Optional[np.ndarray] = None,
    fraction: float = 1.0,
) -> TabularPolicy:
    """A per-state improving policy whose ratios to π_k stay in [1−ε, 1+ε].

    At every state, mass T = fraction·ε·min(π_k(A<0), π_k(A>0)) moves from
    negative-advantage actions to positive-advantage ones, proportionally to
    π_k. Since E_{π_k}A^{π_k} = 0 per state, the new policy has a non-negative
    expected advantage at every state.
    """
    if not 0.0 <= fraction <= 1.0:
        raise OracleError(f"fraction must be in [0, 1], got {fraction}")
    if not 0.0 < epsilon <= 1.0:
        raise OracleError(f"epsilon must be in (0, 1], got {epsilon}")
    if advantages is None:
        advantages = evaluate(mdp, pi_k).A
    probs = pi_k.probs.copy()
    donors = advantages < 0
    receivers = advantages > 0
    donor_mass = np.sum(np.where(donors, probs, 0.0), axis=1)
    receiver_mass = np.sum(np.where(receivers, probs, 0.0), axis=1)
    transfer = fraction * epsilon * np.minimum(donor_mass, receiver_mass)
    with np.errstate(divide="ignore", invalid="ignore"):
        shrink = np.where(donor_mass > 0, transfer / donor_mass, 0.0)
        grow = np.where(receiver_mass > 0, transfer / receiver_mass, 0.0)
    probs = np.where(donors, probs * (1.0 - shrink[:, None]), probs)
    probs = np.where(receivers, probs * (1.0 + grow[:, None]), probs)
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Auxiliary shift bounds
# ---------------------------------------------------------------------------


def visitation_shift_bound(mdp: TabularMDP, pi_tilde: TabularPolicy, pi: TabularPolicy) -> InequalityCheck:
    """‖ρ^π̃ − ρ^π‖₁ ≤ (γ/(1−γ))·E_{s∼ρ^π}‖π̃ − π‖₁(s)."""
    ev_tilde = evaluate(mdp, pi_tilde)
    ev = evaluate(mdp, pi)
    l1 = np.abs(pi_tilde.probs - pi.probs).sum(axis=1)
    return InequalityCheck(
        name="visitation_shift",
        lhs=float(np.abs(ev_tilde.rho - ev.rho).sum()),
        rhs=float(mdp.gamma / (1.0 - mdp.gamma) * (ev.rho @ l1)),
    )


def advantage_shift_bound(mdp: TabularMDP, pi_tilde: TabularPolicy, pi: TabularPolicy) -> InequalityCheck:
    """max_s |E_{a∼π̃}A^π(s, a)| ≤ max_s ‖π̃ − π‖₁(s)·max|A^π|."""
    ev = evaluate(mdp, pi)
    l1 = np.abs(pi_tilde.probs - pi.probs).sum(axis=1)
    return InequalityCheck(
        name="advantage_shift",
        lhs=float(np.max(np.abs(np.sum(pi_tilde.probs * ev.A, axis=1)))),
        rhs=float(l1.max() * np.max(np.abs(ev.A))),
    )


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def _sample_rows(cdf_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(cdf_rows.shape[0])
    return np.minimum((u[:, None] > cdf_rows).sum(axis=1), cdf_rows.shape[1] - 1)


def monte_carlo_return(
    mdp: TabularMDP,
    pi: TabularPolicy,
    episodes: int,
    rng: np.random.Generator,
    horizon: Optional[int] = None,
) -> MonteCarloEstimate:
    """Mean discounted return over independent episodes, all simulated in lockstep.

    Episodes are cut at a horizon where γ^H falls below 1e-12.
    """
    _check_shapes(mdp, pi)
    if episodes < 2:
        raise OracleError("Monte Carlo needs at least 2 episodes for a standard error")
    if horizon is None:
        horizon = 1 if mdp.gamma == 0 else int(math.ceil(math.log(1e-12) / math.log(mdp.gamma)))
    policy_cdf = np.cumsum(pi.probs, axis=1)
    transition_cdf = np.cumsum(mdp.P, axis=2)

    states = _sample_rows(np.tile(np.cumsum(mdp.rho0), (episodes, 1)), rng)
    returns = np.zeros(episodes)
    discount = 1.0
    for _ in range(horizon):
        actions = _sample_rows(policy_cdf[states], rng)
        returns += discount * mdp.R[states, actions]
        states = _sample_rows(transition_cdf[states, actions], rng)
        discount *= mdp.gamma
    return MonteCarloEstimate(
        mean=float(returns.mean()),
        standard_error=float(returns.std(ddof=1) / math.sqrt(episodes)),
        episodes=episodes,
    )


# ---------------------------------------------------------------------------
# Fuzzing
# ---------------------------------------------------------------------------

FUZZ_FIELDS = [
    "instance", "S", "A", "gamma",
    "pdi_lhs", "pdi_rhs", "pdi_gap",
    *(f"l21_{k}" for k in (
        "lhs", "surrogate", "penalty_shift", "penalty_product", "epsilon",
        "delta", "delta_max", "delta_max_anchor", "rhs", "satisfied",
    )),
    *(f"l31_{k}" for k in (
        "lhs", "surrogate", "penalty_shift", "penalty_product", "epsilon",
        "delta", "delta_max", "delta_max_anchor", "rhs", "satisfied",
    )),
    "anchor_consistency_gap",
    "ppo_hypothesis", "ppo_value_before", "ppo_value_after", "ppo_holds",
    "visitation_lhs", "visitation_rhs", "advantage_lhs", "advantage_rhs",
    "improvement_objective", "improvement_anchor_gap",
    "improvement_candidates", "improvement_passed", "improvement_passing_alpha",
    "violations",
]

# Mixture weights of the behavior candidates built around π_k per fuzz instance.
RING_WEIGHTS = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)


def _covering_policy(
    rng: np.random.Generator, pi: TabularPolicy, sparsity: float, attempts: int = 100
) -> TabularPolicy:
    """Random behavior policy that covers ``pi``'s support (rejection sampling)."""
    for _ in range(attempts):
        mu = random_policy(rng, pi.S, pi.A, sparsity)
        if not np.any((pi.probs > 0) & (mu.probs == 0)):
            return mu
    return random_policy(rng, pi.S, pi.A)


def fuzz_instance(
    index: int, seed: int, S: int, A: int, gamma: float, sparsity: float = 0.0, ppo_epsilon: float = 0.2
) -> dict:
    """Check every identity and bound on one random instance; one CSV row."""
    rng = np.random.default_rng([seed, index])
    mdp = random_mdp(int(rng.integers(2 ** 63 - 1)), S, A, gamma, sparsity)
    pi_k = random_policy(rng, S, A, sparsity)
    pi = random_policy(rng, S, A, sparsity)
    mu = _covering_policy(rng, pi, sparsity)

    pdi = performance_difference(mdp, pi, pi_k)
    l21 = lemma21_bound(mdp, pi_k, pi, mu)
    l31 = lemma31_bound(mdp, pi_k, pi, mu)

    anchor_gap = 0.0
    if not np.any((pi.probs > 0) & (pi_k.probs == 0)):
        anchor_gap = abs(lemma21_bound(mdp, pi_k, pi, pi_k).rhs - lemma31_bound(mdp, pi_k, pi, pi_k).rhs)

    pi_next = clipped_surrogate_step(mdp, pi_k, ppo_epsilon, fraction=float(rng.uniform()))
    ppo = ppo_value_improvement(mdp, pi_k, pi_next)
    visitation = visitation_shift_bound(mdp, pi, pi_k)
    advantage = advantage_shift_bound(mdp, pi, pi_k)

    improvement = monotonic_improvement_check(
        mdp, pi_k, candidate_ring(pi_k, rng, RING_WEIGHTS, per_weight=2), iterations=200
    )
    # with μ = π_k the improvement condition is F itself
    improvement_gap = 0.0
    if not np.any((improvement.next_policy.probs > 0) & (pi_k.probs == 0)):
        improvement_gap = abs(improvement_condition(mdp, pi_k, improvement.next_policy, pi_k) - improvement.objective)

    violations = [
        pdi.gap > BOUND_TOLERANCE,
        not l21.satisfied,
        not l31.satisfied,
        anchor_gap > BOUND_TOLERANCE,
        ppo.hypothesis < -HYPOTHESIS_TOLERANCE or not ppo.holds,
        not visitation.satisfied,
        not advantage.satisfied,
        improvement_gap > BOUND_TOLERANCE,
    ]
    row = {
        "instance": index, "S": S, "A": A, "gamma": gamma,
        "pdi_lhs": pdi.lhs, "pdi_rhs": pdi.rhs, "pdi_gap": pdi.gap,
        **l21.as_row("l21"), **l31.as_row("l31"),
        "anchor_consistency_gap": anchor_gap,
        "ppo_hypothesis": ppo.hypothesis,
        "ppo_value_before": ppo.value_before,
        "ppo_value_after": ppo.value_after,
        "ppo_holds": ppo.holds,
        "visitation_lhs": visitation.lhs, "visitation_rhs": visitation.rhs,
        "advantage_lhs": advantage.lhs, "advantage_rhs": advantage.rhs,
        "improvement_objective": improvement.objective,
        "improvement_anchor_gap": improvement_gap,
        "improvement_candidates": len(improvement.candidates),
        "improvement_passed": sum(c.passed for c in improvement.candidates),
        "improvement_passing_alpha": improvement.largest_passing_alpha,
        "violations": int(sum(violations)),
    }
    return row
