"""Reverse-mode gradients over 2-D arrays for the handful of ops the heads use.

A :class:`Tape` records each op with a closure that pushes the output
gradient back to its inputs. Parameters live in a :class:`ParamStore`; the
tape accumulates their gradients there when :meth:`Tape.backward` runs.

    tape = Tape()
    x = tape.constant(batch)
    y = tape.linear(x, tape.param(store, "embed.W"), tape.param(store, "embed.b"))
    loss = tape.bce(tape.sigmoid(y), tape.constant(labels))
    tape.backward(loss)
    sgd_step(store, lr=0.1, momentum=0.9)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional

import numpy as np

BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_backward", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, name: str = ""):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Optional[Callable[[], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor({self.name or '?'}, shape={self.shape})"


def as_2d(value, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    velocity: Optional[np.ndarray] = None


class ParamStore:
    """Named 2-D parameter tensors with gradient buffers, iterated by name."""

    def __init__(self, arrays: Optional[Dict[str, np.ndarray]] = None):
        self._params: Dict[str, Param] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, value) -> None:
        arr = np.array(as_2d(value), dtype=np.float64, copy=True)
        self._params[name] = Param(arr, np.zeros_like(arr))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def __setitem__(self, name: str, value) -> None:
        p = self._params[name]
        arr = as_2d(value)
        if arr.shape != p.value.shape:
            raise ShapeError(f"{name}: cannot assign shape {arr.shape} to {p.value.shape}")
        p.value[...] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n].value) for n in self.names()]

    def grad(self, name: str) -> np.ndarray:
        return self._params[name].grad

    def param(self, name: str) -> Param:
        return self._params[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def copy(self) -> "ParamStore":
        return ParamStore({n: v.copy() for n, v in self.items()})

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore({n: v.copy() for n, v in self.items() if n.startswith(prefix)})

    def merged(self, other: "ParamStore") -> "ParamStore":
        out = self.copy()
        for n, v in other.items():
            out.add(n, v)
        return out

    def n_values(self) -> int:
        return sum(v.size for _, v in self.items())

    def equals(self, other: "ParamStore", atol: float = 0.0) -> bool:
        if self.names() != other.names():
            return False
        for n in self.names():
            a, b = self[n], other[n]
            if a.shape != b.shape:
                return False
            if atol == 0.0:
                if not np.array_equal(a, b):
                    return False
            elif not np.allclose(a, b, rtol=0.0, atol=atol):
                return False
        return True


def init_linear(rng: np.random.Generator, din: int, dout: int) -> tuple:
    """Uniform(-1/sqrt(din), 1/sqrt(din)) weights and zero bias."""
    bound = 1.0 / math.sqrt(din)
    w = rng.uniform(-bound, bound, size=(din, dout))
    return w, np.zeros((1, dout))


class Tape:
    """Records ops for one backward pass. ``record=False`` only evaluates."""

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: list = []
        self._leaves: Dict[tuple, tuple] = {}

    # -- leaves ---------------------------------------------------------
    def constant(self, value, name: str = "") -> Tensor:
        return Tensor(as_2d(value), requires_grad=False, name=name)

    def param(self, store: ParamStore, name: str) -> Tensor:
        key = (id(store), name)
        if key in self._leaves:
            return self._leaves[key][0]
        t = Tensor(store[name], requires_grad=self.record, name=name)
        if self.record:
            self._leaves[key] = (t, store)
        return t

    def _out(self, value: np.ndarray, op: str, parents: tuple, backward) -> Tensor:
        if not np.all(np.isfinite(value)):
            names = ", ".join(p.name or "?" for p in parents)
            raise NonFiniteError(f"{op}({names}) produced non-finite values")
        needs = self.record and any(p.requires_grad for p in parents)
        t = Tensor(value, requires_grad=needs, name=op)
        if needs:
            t._backward = lambda: backward(t.grad)
            self._nodes.append(t)
        return t

    # -- ops ------------------------------------------------------------
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.cols != b.rows:
            raise ShapeError(f"matmul: {a.name or 'a'} {a.shape} @ {b.name or 'b'} {b.shape}")

        def back(g):
            if a.requires_grad:
                a._accumulate(g @ b.value.T)
            if b.requires_grad:
                b._accumulate(a.value.T @ g)

        return self._out(a.value @ b.value, "matmul", (a, b), back)

    def linear(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        if x.cols != w.rows or b.shape != (1, w.cols):
            raise ShapeError(
                f"linear: x {x.shape}, {w.name or 'W'} {w.shape}, {b.name or 'b'} {b.shape}"
            )

        def back(g):
            if x.requires_grad:
                x._accumulate(g @ w.value.T)
            if w.requires_grad:
                w._accumulate(x.value.T @ g)
            if b.requires_grad:
                b._accumulate(g.sum(axis=0, keepdims=True))

        return self._out(x.value @ w.value + b.value, "linear", (x, w, b), back)

    def transpose(self, a: Tensor) -> Tensor:
        def back(g):
            a._accumulate(g.T)

        return self._out(a.value.T.copy(), "transpose", (a,), back)

    def _same_shape(self, op, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: {a.name or 'a'} {a.shape} vs {b.name or 'b'} {b.shape}")

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._same_shape("add", a, b)

        def back(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

        return self._out(a.value + b.value, "add", (a, b), back)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._same_shape("sub", a, b)

        def back(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(-g)

        return self._out(a.value - b.value, "sub", (a, b), back)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._same_shape("mul", a, b)

        def back(g):
            if a.requires_grad:
                a._accumulate(g * b.value)
            if b.requires_grad:
                b._accumulate(g * a.value)

        return self._out(a.value * b.value, "mul", (a, b), back)

    def scale(self, a: Tensor, c: float) -> Tensor:
        def back(g):
            a._accumulate(g * c)

        return self._out(a.value * c, "scale", (a,), back)

    def sigmoid(self, a: Tensor) -> Tensor:
        y = sigmoid(a.value)

        def back(g):
            a._accumulate(g * y * (1.0 - y))

        return self._out(y, "sigmoid", (a,), back)

    def softmax_rows(self, a: Tensor) -> Tensor:
        y = softmax_rows(a.value)

        def back(g):
            inner = (g * y).sum(axis=1, keepdims=True)
            a._accumulate(y * (g - inner))

        return self._out(y, "softmax_rows", (a,), back)

    def total(self, a: Tensor) -> Tensor:
        def back(g):
            a._accumulate(np.full(a.shape, g[0, 0]))

        return self._out(np.array([[a.value.sum()]]), "total", (a,), back)

    def bce(self, p: Tensor, y: Tensor, reduction: str = "mean") -> Tensor:
        """Binary cross-entropy of probabilities ``p`` against 0/1 targets ``y``.

        Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS]; the clamp has zero
        derivative where it is active.
        """
        self._same_shape("bce", p, y)
        c = np.clip(p.value, BCE_EPS, 1.0 - BCE_EPS)
        t = y.value
        losses = -(t * np.log(c) + (1.0 - t) * np.log(1.0 - c))
        n = losses.size if reduction == "mean" else 1
        inside = (p.value > BCE_EPS) & (p.value < 1.0 - BCE_EPS)

        def back(g):
            d = (c - t) / (c * (1.0 - c)) * inside / n
            p._accumulate(g[0, 0] * d)

        return self._out(np.array([[losses.sum() / n]]), "bce", (p, y), back)

    # -- backward -------------------------------------------------------
    def backward(self, loss: Tensor) -> None:
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        if not loss.requires_grad:
            return
        loss.grad = np.ones((1, 1))
        for node in reversed(self._nodes):
            if node.grad is not None:
                node._backward()
        for t, store in self._leaves.values():
            if t.grad is not None:
                store.grad(t.name)[...] += t.grad
        self._nodes.clear()
        self._leaves.clear()


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- verification and optimisation ----------------------------------------


class GradCheckError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def lines(self) -> list:
        return [
            f"{name:28s} rel_err={err:.3e} {'ok' if err <= self.tol else 'FAIL'}"
            for name, err in self.errors.items()
        ]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude.

    The scale never drops below ``floor``, so a tensor whose true gradient is
    exactly zero is judged on the finite-difference noise in absolute terms.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(
    loss_fn: Callable[[Tape, ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-6,
    names: Optional[Iterable[str]] = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients with central finite differences, per tensor.

    ``loss_fn(tape, params)`` must return a 1x1 tensor and be deterministic.
    Parameters are restored to their original values afterwards.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    names = list(names) if names is not None else params.names()
    params.zero_grad()
    tape = Tape()
    loss = loss_fn(tape, params)
    if not np.isfinite(loss.value).all():
        raise GradCheckError("loss is non-finite at the base point")
    tape.backward(loss)
    analytic = {n: params.grad(n).copy() for n in names}
    params.zero_grad()

    def evaluate(name):
        value = float(loss_fn(Tape(record=False), params).value[0, 0])
        if not math.isfinite(value):
            raise GradCheckError(f"non-finite loss while perturbing {name}")
        return value

    report = GradCheckReport(tol=tol)
    for name in names:
        p = params[name]
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = evaluate(name)
            p[idx] = orig - eps
            down = evaluate(name)
            p[idx] = orig
            numeric[idx] = (up - down) / (2.0 * eps)
        report.errors[name] = relative_error(analytic[name], numeric, floor)
    return report


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0) -> None:
    """v <- momentum * v + grad; p <- p - lr * v; then zero the gradients."""
    for name in params.names():
        if not np.all(np.isfinite(params.grad(name))):
            raise NonFiniteError(f"gradient of {name} is non-finite")
    for name in params.names():
        p = params.param(name)
        if p.velocity is None:
            p.velocity = np.zeros_like(p.value)
        p.velocity = momentum * p.velocity + p.grad
        p.value -= lr * p.velocity
        p.grad[...] = 0.0
