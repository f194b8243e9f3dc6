"""Dense float64 algebra with a small reverse-mode tape, Adam, and a gradient checker.

The tape only knows the handful of operators the NSReg networks are built
from. Nodes are appended in creation order, so walking the list backwards is
a valid reverse topological order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

Matrix = np.ndarray


class DimensionError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


def as_matrix(x) -> Matrix:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    return a


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def sigmoid(x: Matrix) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Matrix:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(eq=False)
class ParamGroup:
    name: str
    value: Matrix
    grad: Matrix = field(default=None)  # type: ignore[assignment]
    adam_m: Matrix = field(default=None)  # type: ignore[assignment]
    adam_v: Matrix = field(default=None)  # type: ignore[assignment]
    step_count: int = 0

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        for attr in ("grad", "adam_m", "adam_v"):
            cur = getattr(self, attr)
            if cur is None:
                setattr(self, attr, np.zeros_like(self.value))
            elif np.shape(cur) != self.value.shape:
                raise DimensionError(f"{self.name}.{attr} has shape {np.shape(cur)}, expected {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def copy(self) -> "ParamGroup":
        return ParamGroup(self.name, self.value.copy(), self.grad.copy(), self.adam_m.copy(),
                          self.adam_v.copy(), self.step_count)


def adam_step(group: ParamGroup, cfg: AdamConfig) -> ParamGroup:
    """Bias-corrected Adam update in place; zeroes the gradient afterwards."""
    g = group.grad
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in parameter group {group.name!r}")
    group.step_count += 1
    t = group.step_count
    group.adam_m *= cfg.beta1
    group.adam_m += (1.0 - cfg.beta1) * g
    group.adam_v *= cfg.beta2
    group.adam_v += (1.0 - cfg.beta2) * g * g
    m_hat = group.adam_m / (1.0 - cfg.beta1 ** t)
    v_hat = group.adam_v / (1.0 - cfg.beta2 ** t)
    if cfg.learning_rate != 0.0:
        group.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    group.zero_grad()
    return group


class Var:
    __slots__ = ("value", "grad", "needs_grad", "group", "_backward")

    def __init__(self, value: Matrix, needs_grad: bool = False, group: ParamGroup | None = None):
        self.value = value
        self.grad: Matrix | None = None
        self.needs_grad = needs_grad
        self.group = group
        self._backward: Callable[[Matrix], None] | None = None

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: Matrix) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() on a {self.value.shape} value")
        return float(self.value.reshape(()))


class Tape:
    """Records a forward pass; ``backward`` writes dL/dθ into each ParamGroup.grad.

    Gradients accumulate additively, so a parameter used in several places
    (W_r across a relation batch, shared encoder weights) gets their sum.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self._params: dict[int, Var] = {}

    def _record(self, value: Matrix, parents: tuple[Var, ...], backward) -> Var:
        needs = any(p.needs_grad for p in parents)
        out = Var(value, needs)
        if needs:
            out._backward = backward
            self.nodes.append(out)
        return out

    # leaves -------------------------------------------------------------
    def const(self, x) -> Var:
        return Var(np.asarray(x, dtype=np.float64))

    def param(self, group: ParamGroup) -> Var:
        v = self._params.get(id(group))
        if v is None:
            v = Var(group.value, needs_grad=True, group=group)
            self._params[id(group)] = v
            self.nodes.append(v)
        return v

    @property
    def groups(self) -> list[ParamGroup]:
        return [v.group for v in self._params.values()]

    # operators ----------------------------------------------------------
    def matmul(self, a: Var, b: Var) -> Var:
        out_val = matmul(a.value, b.value)

        def back(g):
            if a.needs_grad:
                a._accumulate(g @ b.value.T)
            if b.needs_grad:
                b._accumulate(a.value.T @ g)
        return self._record(out_val, (a, b), back)

    def spmm(self, m: sp.spmatrix, x: Var) -> Var:
        """Constant sparse matrix times a variable (neighbour aggregation)."""
        if m.shape[1] != x.value.shape[0]:
            raise DimensionError(f"cannot multiply {m.shape[0]}x{m.shape[1]} by "
                                 f"{x.value.shape[0]}x{x.value.shape[1]}")
        mt = m.T.tocsr()

        def back(g):
            x._accumulate(mt @ g)
        return self._record(np.asarray(m @ x.value), (x,), back)

    def add(self, a: Var, b: Var) -> Var:
        """Elementwise sum; a (1, k) operand broadcasts over rows (biases)."""
        out_val = a.value + b.value

        def back(g):
            for p in (a, b):
                if p.needs_grad:
                    p._accumulate(_unbroadcast(g, p.value.shape))
        return self._record(out_val, (a, b), back)

    def sub(self, a: Var, b: Var) -> Var:
        out_val = a.value - b.value

        def back(g):
            if a.needs_grad:
                a._accumulate(_unbroadcast(g, a.value.shape))
            if b.needs_grad:
                b._accumulate(-_unbroadcast(g, b.value.shape))
        return self._record(out_val, (a, b), back)

    def mul(self, a: Var, b: Var) -> Var:
        out_val = a.value * b.value

        def back(g):
            if a.needs_grad:
                a._accumulate(_unbroadcast(g * b.value, a.value.shape))
            if b.needs_grad:
                b._accumulate(_unbroadcast(g * a.value, b.value.shape))
        return self._record(out_val, (a, b), back)

    def scale(self, a: Var, c: float) -> Var:
        def back(g):
            a._accumulate(g * c)
        return self._record(a.value * c, (a,), back)

    def shift(self, a: Var, c: float) -> Var:
        def back(g):
            a._accumulate(g)
        return self._record(a.value + c, (a,), back)

    def sigmoid(self, a: Var) -> Var:
        s = sigmoid(a.value)

        def back(g):
            a._accumulate(g * s * (1.0 - s))
        return self._record(s, (a,), back)

    def relu(self, a: Var) -> Var:
        mask = a.value > 0

        def back(g):
            a._accumulate(g * mask)
        return self._record(a.value * mask, (a,), back)

    def abs(self, a: Var) -> Var:
        sign = np.sign(a.value)

        def back(g):
            a._accumulate(g * sign)
        return self._record(np.abs(a.value), (a,), back)

    def reciprocal(self, a: Var) -> Var:
        out_val = 1.0 / a.value

        def back(g):
            a._accumulate(-g * out_val * out_val)
        return self._record(out_val, (a,), back)

    def rows(self, a: Var, index) -> Var:
        """Gather rows; repeated indices scatter-add on the way back."""
        index = np.asarray(index, dtype=np.int64)

        def back(g):
            full = np.zeros_like(a.value)
            np.add.at(full, index, g)
            a._accumulate(full)
        return self._record(a.value[index], (a,), back)

    def hstack(self, a: Var, b: Var) -> Var:
        k = a.value.shape[1]

        def back(g):
            if a.needs_grad:
                a._accumulate(g[:, :k])
            if b.needs_grad:
                b._accumulate(g[:, k:])
        return self._record(np.hstack([a.value, b.value]), (a, b), back)

    def sum(self, a: Var) -> Var:
        def back(g):
            a._accumulate(np.broadcast_to(g, a.value.shape))
        return self._record(np.array([[a.value.sum()]]), (a,), back)

    def mean(self, a: Var) -> Var:
        n = a.value.size

        def back(g):
            a._accumulate(np.broadcast_to(g / n, a.value.shape))
        return self._record(np.array([[a.value.mean()]]), (a,), back)

    def sq_norm_rows(self, a: Var) -> Var:
        """Row-wise squared Euclidean norm, shape (n, 1)."""
        def back(g):
            a._accumulate(2.0 * a.value * g)
        return self._record((a.value * a.value).sum(axis=1, keepdims=True), (a,), back)

    def bce(self, p: Var, target, clamp: float = 1e-7) -> Var:
        """Elementwise binary cross-entropy of probabilities against soft targets.

        Probabilities are clipped to [clamp, 1 - clamp]; clipped entries pass no gradient.
        """
        c = np.asarray(target, dtype=np.float64).reshape(p.value.shape)
        q = np.clip(p.value, clamp, 1.0 - clamp)
        inside = (p.value >= clamp) & (p.value <= 1.0 - clamp)
        out_val = -(c * np.log(q) + (1.0 - c) * np.log(1.0 - q))

        def back(g):
            p._accumulate(g * inside * (-(c / q) + (1.0 - c) / (1.0 - q)))
        return self._record(out_val, (p,), back)

    # driver -------------------------------------------------------------
    def backward(self, loss: Var, seed: float = 1.0) -> None:
        if not self.nodes or loss._backward is None and loss.group is None:
            raise TapeStateError("backward called before a forward pass recorded a differentiable loss")
        if loss.value.size != 1:
            raise TapeStateError(f"loss must be scalar, got shape {loss.value.shape}")
        loss._accumulate(np.full(loss.value.shape, seed))
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            if node._backward is not None:
                node._backward(node.grad)
            elif node.group is not None:
                node.group.grad += node.grad
        for node in self.nodes:
            node.grad = None


def _unbroadcast(g: Matrix, shape) -> Matrix:
    if g.shape == shape:
        return g
    if len(shape) == 2 and shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if len(shape) == 2 and shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g.reshape(shape)


def grad_check(loss_fn: Callable[[Tape], Var], groups: Iterable[ParamGroup], step: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               corrupt: Callable[[ParamGroup], None] | None = None) -> dict[str, float]:
    """Compare tape gradients to central differences for every group.

    Returns the per-group maximum of |a - n| / max(|a|, |n|, 1e-8). ``max_entries``
    checks a random subset of each group's entries; ``corrupt`` is a hook that
    may tamper with the analytic gradient (negative controls).
    """
    groups = list(groups)
    for gr in groups:
        gr.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    analytic = {gr.name: gr.grad.copy() for gr in groups}
    if corrupt is not None:
        for gr in groups:
            corrupt(gr)
            analytic[gr.name] = gr.grad.copy()
    for gr in groups:
        gr.zero_grad()

    def f() -> float:
        return loss_fn(Tape()).item()

    report: dict[str, float] = {}
    for gr in groups:
        flat = gr.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        a = analytic[gr.name].reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(a[i] - num) / max(abs(a[i]), abs(num), 1e-8)
            worst = max(worst, err)
        report[gr.name] = worst
    return report
