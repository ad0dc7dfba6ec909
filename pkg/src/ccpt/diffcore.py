"""Small reverse-mode autodiff over 2-D float64 arrays, plus AdamW.

Only the handful of operations the contrastive and distillation losses need
are provided. There is no broadcasting beyond a row-vector bias add and a
scalar-tensor scale/divide.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """A float64 array that can sit on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar for tests and small scripts
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple, backward: Callable) -> Tensor:
    # Only record on the tape when some input needs a gradient.
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, op, parents, backward)
    return Tensor(data, False, op)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- linear ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _node(x.data.T.copy(), "transpose", (x,), lambda g: (g.T,))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def add_rowvec(x, bias) -> Tensor:
    """x[n, d] + bias[d], the bias repeated on every row."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_rowvec: bias {bias.shape} does not fit rows of {x.shape}")
    return _node(x.data + bias.data, "add_rowvec", (x, bias), lambda g: (g, g.sum(axis=0)))


def scalar_mul(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _node(x.data * c, "scalar_mul", (x,), lambda g: (g * c,))


def scale(x, s) -> Tensor:
    """x times a scalar tensor s."""
    x, s = as_tensor(x), as_tensor(s)
    if s.data.size != 1:
        raise ShapeError("scale: s must be a scalar")
    sv = float(s.data)

    def backward(g):
        return g * sv, np.asarray(np.sum(g * x.data)).reshape(s.shape)

    return _node(x.data * sv, "scale", (x, s), backward)


def divide_by(x, s) -> Tensor:
    """x divided by a positive scalar tensor s."""
    x, s = as_tensor(x), as_tensor(s)
    if s.data.size != 1:
        raise ShapeError("divide_by: s must be a scalar")
    sv = float(s.data)
    if not sv > 0.0:
        raise ParameterError(f"divide_by: divisor must be positive, got {sv}")
    out = x.data / sv

    def backward(g):
        return g / sv, np.asarray(-np.sum(g * out) / sv).reshape(s.shape)

    return _node(out, "divide_by", (x, s), backward)


# ----------------------------------------------------------- elementwise ops

def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _node(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _node(y, "exp", (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------- reductions

def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _node(np.asarray(x.data.sum()), "sum", (x,),
                 lambda g: (np.full(shape, float(g)),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _node(np.asarray(x.data.mean()), "mean", (x,),
                 lambda g: (np.full(shape, float(g) / n),))


def trace(x) -> Tensor:
    """Sum of the main diagonal of a square matrix."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"trace expects a square matrix, got {x.shape}")
    n = x.shape[0]
    return _node(np.asarray(np.trace(x.data)), "trace", (x,),
                 lambda g: (np.eye(n) * float(g),))


# ------------------------------------------------------------- row-wise ops

def l2_normalize_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("l2_normalize_rows expects a matrix")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    if np.any(norms < NORM_EPS):
        raise DegenerateInputError("row with (near-)zero norm cannot be normalized")
    u = x.data / norms

    def backward(g):
        # (I - u u^T) g / |x| per row
        return ((g - u * np.sum(g * u, axis=1, keepdims=True)) / norms,)

    return _node(u, "l2_normalize_rows", (x,), backward)


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(x, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    if not temperature > 0.0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    p = softmax_array(x.data / temperature)

    def backward(g):
        return ((p * (g - np.sum(g * p, axis=1, keepdims=True))) / temperature,)

    return _node(p, "row_softmax", (x,), backward)


def row_log_softmax(x) -> Tensor:
    x = as_tensor(x)
    out = log_softmax_array(x.data)

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _node(out, "row_log_softmax", (x,), backward)


# ------------------------------------------------------------------ backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` is called with no arguments and must read ``params`` in place.
    """
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_fn().item()
            flat[k] = orig - h
            down = loss_fn().item()
            flat[k] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# ----------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 3e-4
    warmup_steps: int = 0
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], learning_rate: float,
                   warmup_steps: int = 0, weight_decay: float = 0.0) -> "OptimizerState":
        if not learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if warmup_steps < 0 or weight_decay < 0:
            raise ParameterError("warmup_steps and weight_decay must be non-negative")
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params],
                   0, float(learning_rate), int(warmup_steps), float(weight_decay))

    def effective_lr(self) -> float:
        if self.warmup_steps == 0:
            return self.learning_rate
        return min(self.step_count / self.warmup_steps, 1.0) * self.learning_rate


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def optimizer_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
                   state: OptimizerState, snap_float32: bool = False) -> None:
    """One AdamW update in place. ``None`` grads count as zeros.

    With ``snap_float32`` the parameters and moments are rounded onto the
    float32 grid afterwards so a 32-bit checkpoint holds them exactly.
    """
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ContractError("params, grads and optimizer moments differ in length")
    lr = state.effective_lr()
    t = state.step_count + 1
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ContractError(f"shape mismatch: param {p.data.shape}, grad {g.shape}, moment {m.shape}")
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data -= lr * (update + state.weight_decay * p.data)
        if snap_float32:
            p.data[...] = p.data.astype(np.float32)
            m[...] = m.astype(np.float32)
            v[...] = v.astype(np.float32)
    state.step_count = t
