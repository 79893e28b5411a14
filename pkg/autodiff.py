"""
Reverse-Mode Autodiff
=====================

Minimal tape-based reverse-mode differentiation over dense float64 arrays.

Every primitive records its output value, the indices of its parents on the
tape and a vector-Jacobian product closure. A backward pass walks the tape
once in reverse order and accumulates gradients into the named leaves
(parameters and graph inputs).

The primitive set is deliberately small: affine, tanh, exp, log, sum, mean,
add/sub/mul/div, minimum/maximum, clip, square, log_softmax and pick (the
two pieces of the categorical log-prob composite). Binary operations
broadcast the way dense MLP code needs (row vectors over a batch).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int]
Params = dict[str, np.ndarray]


class AutodiffError(Exception):
    """Base error for tape construction and differentiation."""


class ShapeError(AutodiffError):
    """Operand or seed shapes are incompatible."""


class NonFiniteError(AutodiffError):
    """A primitive produced NaN or Inf."""


class TapeConsumedError(AutodiffError):
    """backward() was called twice on the same tape."""


VJP = Callable[[np.ndarray], tuple[np.ndarray, ...]]


@dataclass
class _Node:
    value: np.ndarray
    parents: tuple[int, ...]
    vjp: Optional[VJP]
    op: str
    name: Optional[str] = None


class Tape:
    """Ordered record of primitive operations.

    Parents always precede children because nodes are appended as they are
    computed, so the tape is topologically ordered by construction.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False
        self.output: Optional["Tensor"] = None

    def _record(
        self,
        value: np.ndarray,
        parents: tuple[int, ...],
        vjp: Optional[VJP],
        op: str,
        name: Optional[str] = None,
    ) -> "Tensor":
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"Non-finite value produced by '{op}'")
        self.nodes.append(_Node(value=value, parents=parents, vjp=vjp, op=op, name=name))
        return Tensor(self, len(self.nodes) - 1)

    def parameter(self, name: str, array: ArrayLike) -> "Tensor":
        """Record a named leaf that receives a gradient."""
        if any(node.name == name for node in self.nodes):
            raise AutodiffError(f"Duplicate leaf name '{name}'")
        return self._record(np.array(array, dtype=np.float64), (), None, "leaf", name=name)

    def constant(self, array: ArrayLike) -> "Tensor":
        """Record an unnamed leaf (no gradient reported)."""
        return self._record(np.array(array, dtype=np.float64), (), None, "const")


class Tensor:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index")
    # numpy arrays on the left must defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int) -> None:
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Values in row-major order."""
        return self.value.ravel(order="C")

    def __add__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.tape.nodes[self.index].op})"


def _tape_of(*operands: Union[Tensor, ArrayLike]) -> Tape:
    for operand in operands:
        if isinstance(operand, Tensor):
            return operand.tape
    raise AutodiffError("At least one operand must be a Tensor")


def _lift(tape: Tape, operand: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(operand, Tensor):
        if operand.tape is not tape:
            raise AutodiffError("Operands recorded on different tapes")
        return operand
    return tape.constant(operand)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"'{op}': cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# Binary primitives
# ---------------------------------------------------------------------------


def _binary(a, b, op: str, fn, grad_a, grad_b) -> Tensor:
    tape = _tape_of(a, b)
    ta, tb = _lift(tape, a), _lift(tape, b)
    va, vb = ta.value, tb.value
    _broadcast_shape(va, vb, op)
    out = fn(va, vb)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return (
            _unbroadcast(grad_a(g, va, vb, out), va.shape),
            _unbroadcast(grad_b(g, va, vb, out), vb.shape),
        )

    return tape._record(out, (ta.index, tb.index), vjp, op)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(
        a, b, "mul", np.multiply,
        lambda g, x, y, o: g * y,
        lambda g, x, y, o: g * x,
    )


def div(a, b) -> Tensor:
    return _binary(
        a, b, "div", np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * x / (y * y),
    )


def minimum(a, b) -> Tensor:
    """Elementwise min. Ties send the whole gradient to the first operand."""
    return _binary(
        a, b, "minimum", np.minimum,
        lambda g, x, y, o: g * (x <= y),
        lambda g, x, y, o: g * (x > y),
    )


def maximum(a, b) -> Tensor:
    """Elementwise max. Ties send the whole gradient to the first operand."""
    return _binary(
        a, b, "maximum", np.maximum,
        lambda g, x, y, o: g * (x >= y),
        lambda g, x, y, o: g * (x < y),
    )


# ---------------------------------------------------------------------------
# Unary primitives
# ---------------------------------------------------------------------------


def _unary(x: Tensor, op: str, fn, grad) -> Tensor:
    vx = x.value
    with np.errstate(all="ignore"):
        out = fn(vx)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return (grad(g, vx, out),)

    return x.tape._record(out, (x.index,), vjp, op)


def tanh(x: Tensor) -> Tensor:
    return _unary(x, "tanh", np.tanh, lambda g, v, o: g * (1.0 - o * o))


def exp(x: Tensor) -> Tensor:
    return _unary(x, "exp", np.exp, lambda g, v, o: g * o)


def log(x: Tensor) -> Tensor:
    return _unary(x, "log", np.log, lambda g, v, o: g / v)


def square(x: Tensor) -> Tensor:
    return _unary(x, "square", np.square, lambda g, v, o: 2.0 * g * v)


def clip(x: Tensor, lower: ArrayLike, upper: ArrayLike) -> Tensor:
    """Clamp into [lower, upper]; bounds are constants.

    The gradient passes only strictly inside the interval, so a sample sitting
    exactly on a bound has zero subgradient.
    """
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    try:
        np.broadcast_shapes(x.shape, lo.shape, hi.shape)
    except ValueError:
        raise ShapeError(f"'clip': bounds {lo.shape}/{hi.shape} do not fit {x.shape}")
    return _unary(
        x, "clip",
        lambda v: np.minimum(np.maximum(v, lo), hi),
        lambda g, v, o: g * ((v > lo) & (v < hi)),
    )


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    vx = x.value
    out = np.sum(vx, axis=axis)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        if axis is None:
            return (np.broadcast_to(g, vx.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), vx.shape).copy(),)

    return x.tape._record(out, (x.index,), vjp, "sum")


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.value.size if axis is None else x.value.shape[axis]
    if count == 0:
        raise ShapeError("'mean' over an empty axis")
    return div(sum(x, axis=axis), float(count))


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer ``x @ W + b`` for a single row or a batch of rows."""
    vx, vw, vb = x.value, weight.value, bias.value
    if vw.ndim != 2 or vb.shape != (vw.shape[1],) or vx.shape[-1] != vw.shape[0] or vx.ndim > 2:
        raise ShapeError(
            f"'affine': x{vx.shape} @ W{vw.shape} + b{vb.shape} is not a dense layer"
        )
    out = vx @ vw + vb

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        gx = g @ vw.T
        if vx.ndim == 1:
            gw = np.outer(vx, g)
            gb = g
        else:
            gw = vx.T @ g
            gb = g.sum(axis=0)
        return gx, gw, gb

    return x.tape._record(out, (x.index, weight.index, bias.index), vjp, "affine")


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    vx = x.value
    shifted = vx - vx.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        probs = np.exp(out)
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return x.tape._record(out, (x.index,), vjp, "log_softmax")


def pick(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select one entry per row: ``x[i, indices[i]]``."""
    vx = x.value
    idx = np.asarray(indices, dtype=np.int64)
    if vx.ndim != 2 or idx.shape != (vx.shape[0],):
        raise ShapeError(f"'pick': indices {idx.shape} do not match rows of {vx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= vx.shape[1]):
        raise ShapeError("'pick': index out of range")
    rows = np.arange(vx.shape[0])
    out = vx[rows, idx]

    def vjp(g: np.ndarray) -> tuple[np.ndarray, ...]:
        full = np.zeros_like(vx)
        full[rows, idx] = g
        return (full,)

    return x.tape._record(out, (x.index,), vjp, "pick")


def categorical_log_prob(logits: Tensor, actions: np.ndarray) -> Tensor:
    return pick(log_softmax(logits), actions)


# ---------------------------------------------------------------------------
# Whole-graph entry points
# ---------------------------------------------------------------------------

Graph = Callable[[list[Tensor], dict[str, Tensor]], Tensor]


def forward(
    graph: Graph,
    inputs: Sequence[ArrayLike],
    params: Optional[Mapping[str, ArrayLike]] = None,
) -> tuple[Tensor, Tape]:
    """Evaluate ``graph(inputs, params)`` on a fresh tape.

    Inputs are recorded as leaves named ``input0``, ``input1``... so their
    gradients are reported next to the parameters'.
    """
    tape = Tape()
    input_tensors = [tape.parameter(f"input{i}", x) for i, x in enumerate(inputs)]
    param_tensors = {name: tape.parameter(name, value) for name, value in (params or {}).items()}
    output = graph(input_tensors, param_tensors)
    if not isinstance(output, Tensor) or output.tape is not tape:
        raise AutodiffError("Graph must return a Tensor recorded on its own tape")
    tape.output = output
    return output, tape


def backward(
    tape: Tape,
    seed: Optional[ArrayLike] = None,
    output: Optional[Tensor] = None,
) -> dict[str, np.ndarray]:
    """Reverse pass. Returns a gradient for every named leaf on the tape."""
    if tape.consumed:
        raise TapeConsumedError("Tape already consumed by a previous backward pass")
    output = output or tape.output
    if output is None:
        if not tape.nodes:
            raise AutodiffError("Empty tape")
        output = Tensor(tape, len(tape.nodes) - 1)

    out_value = tape.nodes[output.index].value
    seed_array = np.ones_like(out_value) if seed is None else np.asarray(seed, dtype=np.float64)
    if seed_array.shape != out_value.shape:
        raise ShapeError(f"Seed shape {seed_array.shape} != output shape {out_value.shape}")

    tape.consumed = True
    grads: list[Optional[np.ndarray]] = [None] * (output.index + 1)
    grads[output.index] = seed_array
    for i in range(output.index, -1, -1):
        node = tape.nodes[i]
        g = grads[i]
        if g is None or node.vjp is None:
            continue
        for parent, parent_grad in zip(node.parents, node.vjp(g)):
            if grads[parent] is None:
                grads[parent] = parent_grad
            else:
                grads[parent] = grads[parent] + parent_grad

    result: dict[str, np.ndarray] = {}
    for i, node in enumerate(tape.nodes):
        if node.name is None:
            continue
        g = grads[i] if i < len(grads) else None
        result[node.name] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64)
    return result


def value_and_grad(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, ArrayLike],
) -> tuple[float, Params]:
    """Scalar ``fn(params)`` and its gradient w.r.t. every parameter."""
    out, tape = forward(lambda _, p: fn(p), [], params)
    if out.value.shape != ():
        raise ShapeError(f"value_and_grad needs a scalar output, got {out.value.shape}")
    grads = backward(tape)
    return float(out.value), {name: grads[name] for name in params}


def numerical_gradient(
    fn: Callable[[Params], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> Params:
    """Central finite differences of a scalar function, one coordinate at a time."""
    base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    grads: Params = {}
    for name, value in base.items():
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + h
            f_plus = fn(base)
            flat[j] = original - h
            f_minus = fn(base)
            flat[j] = original
            grad.reshape(-1)[j] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = grad
    return grads


def relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    """Norm-wise relative difference between two gradient dictionaries."""
    diff = np.sqrt(np.sum([np.sum((a[k] - b[k]) ** 2) for k in a]))
    scale = max(
        np.sqrt(np.sum([np.sum(a[k] ** 2) for k in a])),
        np.sqrt(np.sum([np.sum(b[k] ** 2) for k in b])),
        1e-8,
    )
    return float(diff / scale)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam moments, one pair of accumulators per parameter."""

    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **kwargs) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            v={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            **kwargs,
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[Params, AdamState]:
    """One Adam update. Inputs are left untouched; new arrays are returned."""
    if state.step < 0:
        raise AutodiffError("Adam step count must be non-negative")
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("Adam parameters, gradients and state do not share keys")

    step = state.step + 1
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != value.shape or state.m[name].shape != value.shape:
            raise ShapeError(f"Adam shape mismatch for '{name}': {value.shape} vs {g.shape}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** step)
        v_hat = v / (1.0 - state.beta2 ** step)
        new_params[name] = value - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, step=step, m=new_m, v=new_v)
