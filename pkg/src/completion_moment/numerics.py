"""Dense float64 kernels with exact reverse-mode gradients.

Arrays are plain ``numpy.ndarray`` in float64. Vectors are 1-D, matrices
2-D and row-major. The pure kernels (:func:`affine`, :func:`sigmoid`,
:func:`temporal_softmax`, :func:`cell_forward`, :func:`sequence_forward`)
have no side effects; :class:`Tape` records a graph of the same kernels and
replays it backwards.

LSTM gate layout is ``(input, forget, cell, output)`` stacked along the first
axis of every cell tensor, so a cell with hidden size H has
``input_weights`` of shape (4H, D), ``recurrent_weights`` (4H, H) and
``biases`` (4H,).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

GATES = ("input", "forget", "cell", "output")


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Pure kernels
# ---------------------------------------------------------------------------

def affine(x, W, b) -> np.ndarray:
    """Return ``W x + b``.

    ``x`` may be a single vector of length D or a (T, D) stack of row
    vectors, in which case the map is applied to every row.
    """
    x, W, b = _as_array(x), _as_array(W), _as_array(b)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: x{x.shape}, W{W.shape}, b{b.shape} do not compose")
    return x @ W.T + b


def sigmoid(z):
    """Logistic function, evaluated without overflow for large |z|."""
    z = _as_array(z)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def temporal_softmax(o) -> np.ndarray:
    o = _as_array(o)
    if o.ndim != 1 or o.size == 0:
        raise ShapeError(f"temporal_softmax needs a non-empty vector, got shape {o.shape}")
    e = np.exp(o - o.max())
    return e / e.sum()


@dataclass
class CellParams:
    input_weights: np.ndarray
    recurrent_weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.input_weights = _as_array(self.input_weights)
        self.recurrent_weights = _as_array(self.recurrent_weights)
        self.biases = _as_array(self.biases)
        H = self.recurrent_weights.shape[1] if self.recurrent_weights.ndim == 2 else -1
        if (
            self.recurrent_weights.shape != (4 * H, H)
            or self.input_weights.ndim != 2
            or self.input_weights.shape[0] != 4 * H
            or self.biases.shape != (4 * H,)
        ):
            raise ShapeError(
                "inconsistent cell shapes: "
                f"Wx{self.input_weights.shape} Wh{self.recurrent_weights.shape} b{self.biases.shape}"
            )

    @property
    def hidden_size(self) -> int:
        return self.recurrent_weights.shape[1]

    @property
    def input_size(self) -> int:
        return self.input_weights.shape[1]

    @classmethod
    def initialize(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "CellParams":
        """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias 1, other biases 0."""
        k = 1.0 / np.sqrt(hidden_size)
        H = hidden_size
        Wx = rng.uniform(-k, k, size=(4 * H, input_size))
        Wh = rng.uniform(-k, k, size=(4 * H, H))
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        return cls(Wx, Wh, b)

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "CellParams":
        H = hidden_size
        return cls(np.zeros((4 * H, input_size)), np.zeros((4 * H, H)), np.zeros(4 * H))


def _cell_step(x_t, h_prev, c_prev, p: CellParams):
    H = p.hidden_size
    z = p.input_weights @ x_t + p.recurrent_weights @ h_prev + p.biases
    i = sigmoid(z[:H])
    f = sigmoid(z[H:2 * H])
    g = np.tanh(z[2 * H:3 * H])
    o = sigmoid(z[3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (i, f, g, o, tc)


def cell_forward(x_t, h_prev, c_prev, p: CellParams) -> tuple[np.ndarray, np.ndarray]:
    x_t, h_prev, c_prev = _as_array(x_t), _as_array(h_prev), _as_array(c_prev)
    H = p.hidden_size
    if x_t.shape != (p.input_size,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ShapeError(
            f"cell_forward: x{x_t.shape} h{h_prev.shape} c{c_prev.shape} vs D={p.input_size}, H={H}"
        )
    h, c, _ = _cell_step(x_t, h_prev, c_prev, p)
    return h, c


@dataclass
class SequenceCache:
    """Everything the backward pass of one unrolled cell needs."""

    X: np.ndarray
    H: np.ndarray
    C: np.ndarray
    gates: np.ndarray  # (T, 4, H): i, f, g, o
    tanh_c: np.ndarray


def _sequence_forward(X, p: CellParams) -> SequenceCache:
    X = _as_array(X)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] != p.input_size:
        raise ShapeError(f"sequence_forward: X{X.shape} vs input size {p.input_size}")
    T, Hs = X.shape[0], p.hidden_size
    Hout = np.zeros((T, Hs))
    C = np.zeros((T, Hs))
    gates = np.zeros((T, 4, Hs))
    tanh_c = np.zeros((T, Hs))
    # input contribution for every step in one product
    Zx = X @ p.input_weights.T + p.biases
    h = np.zeros(Hs)
    c = np.zeros(Hs)
    Wh = p.recurrent_weights
    for t in range(T):
        z = Zx[t] + Wh @ h
        i = sigmoid(z[:Hs])
        f = sigmoid(z[Hs:2 * Hs])
        g = np.tanh(z[2 * Hs:3 * Hs])
        o = sigmoid(z[3 * Hs:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        Hout[t], C[t], tanh_c[t] = h, c, tc
        gates[t, 0], gates[t, 1], gates[t, 2], gates[t, 3] = i, f, g, o
    return SequenceCache(X, Hout, C, gates, tanh_c)


def sequence_forward(X, p: CellParams) -> np.ndarray:
    """Unroll the cell over the rows of ``X`` from a zero state; returns (T, H)."""
    return _sequence_forward(X, p).H


def sequence_backward(cache: SequenceCache, p: CellParams, dH) -> tuple[np.ndarray, CellParams]:
    """Backpropagation through time.

    ``dH`` is the gradient of a scalar with respect to every hidden state
    (shape (T, H)). Returns the gradient with respect to ``X`` and a
    :class:`CellParams` holding the parameter gradients.
    """
    dH = _as_array(dH)
    T, Hs = cache.H.shape
    if dH.shape != (T, Hs):
        raise ShapeError(f"sequence_backward: dH{dH.shape} vs H{cache.H.shape}")
    Wh = p.recurrent_weights
    dZ = np.zeros((T, 4 * Hs))
    dh_next = np.zeros(Hs)
    dc_next = np.zeros(Hs)
    for t in range(T - 1, -1, -1):
        i, f, g, o = cache.gates[t]
        tc = cache.tanh_c[t]
        c_prev = cache.C[t - 1] if t > 0 else np.zeros(Hs)
        dh = dH[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dZ[t]
        dz[:Hs] = dc * g * i * (1.0 - i)
        dz[Hs:2 * Hs] = dc * c_prev * f * (1.0 - f)
        dz[2 * Hs:3 * Hs] = dc * i * (1.0 - g * g)
        dz[3 * Hs:] = dh * tc * o * (1.0 - o)
        dh_next = Wh.T @ dz
        dc_next = dc * f
    H_prev = np.vstack([np.zeros((1, Hs)), cache.H[:-1]])
    grads = CellParams(dZ.T @ cache.X, dZ.T @ H_prev, dZ.sum(axis=0))
    dX = dZ @ p.input_weights
    return dX, grads


# ---------------------------------------------------------------------------
# Recorded graph
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "tape")

    def __init__(self, value, tape, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} shape={self.value.shape}>"


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Single-owner record of operations for one backward pass.

    Parameters enter through :meth:`param` and are reported by name from
    :meth:`backward`. Constants enter through :meth:`const`. Every other
    method records one kernel application.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # leaves -------------------------------------------------------------
    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise StateError(f"parameter {name!r} registered twice")
        node = Node(_as_array(value), self, name=name)
        self.params[name] = node
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        node = Node(_as_array(value), self)
        self.nodes.append(node)
        return node

    def _record(self, value, parents, backward_fn) -> Node:
        for p in parents:
            if p.tape is not self:
                raise StateError("operand recorded on a different tape")
        node = Node(value, self, tuple(parents), backward_fn)
        self.nodes.append(node)
        return node

    # elementwise ----------------------------------------------------------
    def add(self, a: Node, b: Node) -> Node:
        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return self._record(a.value + b.value, (a, b), bw)

    def sub(self, a: Node, b: Node) -> Node:
        def bw(g):
            return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
        return self._record(a.value - b.value, (a, b), bw)

    def mul(self, a: Node, b: Node) -> Node:
        def bw(g):
            return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)
        return self._record(a.value * b.value, (a, b), bw)

    def scale(self, a: Node, k: float) -> Node:
        return self._record(a.value * k, (a,), lambda g: (g * k,))

    def shift(self, a: Node, k: float) -> Node:
        return self._record(a.value + k, (a,), lambda g: (g,))

    def square(self, a: Node) -> Node:
        return self._record(a.value ** 2, (a,), lambda g: (2.0 * a.value * g,))

    def sigmoid(self, a: Node) -> Node:
        s = _as_array(sigmoid(a.value))
        return self._record(s, (a,), lambda g: (g * s * (1.0 - s),))

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)
        return self._record(y, (a,), lambda g: (g * (1.0 - y * y),))

    def log(self, a: Node) -> Node:
        if np.any(a.value <= 0):
            raise NumericError("log of a non-positive value")
        return self._record(np.log(a.value), (a,), lambda g: (g / a.value,))

    def clip(self, a: Node, lo: float, hi: float) -> Node:
        inside = (a.value >= lo) & (a.value <= hi)
        return self._record(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))

    # reductions and maps ----------------------------------------------------
    def sum(self, a: Node) -> Node:
        shape = a.shape
        return self._record(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def affine(self, x: Node, W: Node, b: Node) -> Node:
        y = affine(x.value, W.value, b.value)

        def bw(g):
            if x.value.ndim == 1:
                return g @ W.value, np.outer(g, x.value), g
            return g @ W.value, g.T @ x.value, g.sum(axis=0)
        return self._record(y, (x, W, b), bw)

    def column(self, a: Node) -> Node:
        """(T, 1) -> (T,)."""
        shape = a.shape
        if len(shape) != 2 or shape[1] != 1:
            raise ShapeError(f"column: expected (T, 1), got {shape}")
        return self._record(a.value[:, 0].copy(), (a,), lambda g: (g.reshape(shape),))

    def temporal_softmax(self, o: Node) -> Node:
        a = temporal_softmax(o.value)
        return self._record(a, (o,), lambda g: (a * (g - np.dot(g, a)),))

    def lstm(self, X: Node, Wx: Node, Wh: Node, b: Node) -> Node:
        """Unrolled cell over the rows of ``X``; returns the (T, H) hidden states."""
        p = CellParams(Wx.value, Wh.value, b.value)
        cache = _sequence_forward(X.value, p)

        def bw(g):
            dX, grads = sequence_backward(cache, p, g)
            return dX, grads.input_weights, grads.recurrent_weights, grads.biases
        return self._record(cache.H, (X, Wx, Wh, b), bw)

    # reverse sweep ------------------------------------------------------------
    def backward(self, loss: Node | None) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``loss`` with respect to every registered parameter.

        Parameters the loss does not depend on get zero gradients.
        """
        if loss is None or not isinstance(loss, Node) or loss.tape is not self or not self.nodes:
            raise StateError("backward called before a forward pass was recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        stop = self.nodes.index(loss)
        for node in reversed(self.nodes[: stop + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                g = np.asarray(g, dtype=np.float64).reshape(parent.shape)
                parent.grad = g.copy() if parent.grad is None else parent.grad + g
        return {
            name: (node.grad if node.grad is not None else np.zeros_like(node.value))
            for name, node in self.params.items()
        }


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference_gradient(f: Callable, p, eps: float = 1e-5, dtype=np.float64):
    """Central-difference gradient of the scalar function ``f``.

    ``p`` is either an array (``f`` takes an array) or a mapping of named
    arrays (``f`` takes a mapping); the result has the same structure and is
    returned in float64. The point is copied to ``dtype`` before perturbing,
    so ``f`` sees (and may compute in) that precision.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(p, Mapping):
        point = {k: np.array(v, dtype=dtype) for k, v in p.items()}
        out = {}
        for name, arr in point.items():
            out[name] = _fd_into(lambda: f(point), arr, eps, name)
        return out
    arr = np.array(p, dtype=dtype)
    return _fd_into(lambda: f(arr), arr, eps, "p")


def _fd_into(evaluate, arr: np.ndarray, eps: float, name: str) -> np.ndarray:
    eps = arr.dtype.type(eps)
    grad = np.zeros(arr.shape, dtype=arr.dtype)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = evaluate()
        flat[k] = orig - eps
        down = evaluate()
        flat[k] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite objective while perturbing {name}[{k}]")
        gflat[k] = (up - down) / (2 * eps)
    return grad.astype(np.float64)


EXTENDED = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


def reference_sequence_forward(X, Wx, Wh, b, dtype=EXTENDED) -> np.ndarray:
    """Plain LSTM unroll at ``dtype`` precision.

    Shares no code with :func:`sequence_forward`; finite-difference checks
    evaluate through this path so their roundoff stays far below the
    tolerance even for gradients near zero.
    """
    X, Wx, Wh, b = (np.asarray(v, dtype=dtype) for v in (X, Wx, Wh, b))
    H = Wh.shape[1]
    one = dtype(1)
    Zx = X @ Wx.T + b
    h = np.zeros(H, dtype=dtype)
    c = np.zeros(H, dtype=dtype)
    out = np.empty((X.shape[0], H), dtype=dtype)
    for t in range(X.shape[0]):
        z = Zx[t] + Wh @ h
        ifo = one / (one + np.exp(-z[np.r_[0:2 * H, 3 * H:4 * H]]))
        c = ifo[H:2 * H] * c + ifo[:H] * np.tanh(z[2 * H:3 * H])
        h = ifo[2 * H:] * np.tanh(c)
        out[t] = h
    return out


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = _as_array(a), _as_array(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradReport:
    errors: dict[str, float]
    eps: float
    tol: float
    label: str = ""
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.errors) and self.max_error < self.tol

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=float("inf"))

    @property
    def failing(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tol]


def compare_gradients(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                      eps: float, tol: float = 1e-4, label: str = "") -> GradReport:
    if set(analytic) != set(numeric):
        raise KeyError(f"gradient sets differ: {sorted(set(analytic) ^ set(numeric))}")
    errors = {}
    for name in analytic:
        err = relative_error(analytic[name], numeric[name])
        errors[name] = float(err.max()) if err.size else 0.0
    return GradReport(errors, eps, tol, label)
