"""Dense tensors and a tape-based reverse-mode gradient engine.

The op vocabulary is fixed to what the models in this package need:
matmul, elementwise arithmetic, the five activations, softmax /
log-softmax, RMS norm, causal depthwise conv, embedding gather,
reductions, slicing/concat, and the quantizing neuron op registered
from :mod:`spikessm.neurons`. There is no graph compiler; gradients
are accumulated by walking the tape in reverse creation order, which
makes every run bit-reproducible.

Tape construction and backward are single-threaded per model instance.
Tensors are treated as immutable once created (the optimizer swaps the
buffer of leaf parameters between steps), so forward-only inference
over independent sequences may run in parallel threads.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract forbids it."""


# ---------------------------------------------------------------------------
# precision control: float32 for training runs, float64 for gradient checks

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32


def set_default_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise ContractError(f"unknown dtype {name!r}; expected float32 or float64")
    global _default_dtype
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def dtype_scope(name: str):
    """Temporarily switch the default precision (used by gradient-check mode)."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = prev


# ---------------------------------------------------------------------------
# tape

_GRAPH_STACK: list["Graph | None"] = []


def active_graph() -> "Graph | None":
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


@contextmanager
def pause_recording():
    """Run forward computations without recording them on the active tape."""
    _GRAPH_STACK.append(None)
    try:
        yield
    finally:
        _GRAPH_STACK.pop()


class Graph:
    """Reverse-mode tape.

    Nodes are appended in creation order; ``backward`` walks them in
    reverse creation order, single-threaded, so gradient accumulation
    order is deterministic run to run.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _GRAPH_STACK.pop()

    def backward(self, loss: "Tensor", wrt: Sequence["Tensor"]) -> dict[int, np.ndarray]:
        """Gradients of a scalar loss for every tensor in ``wrt``.

        Returns a dict keyed by ``id(tensor)``; tensors that do not
        influence the loss get an explicit zero gradient.
        """
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node), None)
            if g_out is None or node._grad_fn is None:
                continue
            for inp, g_in in zip(node._inputs, node._grad_fn(g_out)):
                if g_in is None:
                    continue
                prior = grads.get(id(inp))
                grads[id(inp)] = g_in if prior is None else prior + g_in
        return {
            id(p): grads.get(id(p), np.zeros_like(p.data))
            for p in wrt
        }


def backward(graph: Graph, loss: "Tensor", wrt: Sequence["Tensor"]) -> dict[int, np.ndarray]:
    return graph.backward(loss, wrt)


# ---------------------------------------------------------------------------
# tensor

class Tensor:
    """Immutable dense array node. ``data`` is a numpy array in the
    run precision; op results carry the closure needed for backward."""

    __slots__ = ("data", "trainable", "name", "_inputs", "_grad_fn", "_op")

    def __init__(self, data, trainable: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=default_dtype())
        self.trainable = trainable
        self.name = name
        self._inputs: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], tuple] | None = None
        self._op: str = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, trainable=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.trainable = False
    out.name = ""
    out._op = op
    g = active_graph()
    if g is not None:
        out._inputs = inputs
        out._grad_fn = grad_fn
        g.nodes.append(out)
    else:
        out._inputs = ()
        out._grad_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, "add", (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, "sub", (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, "mul", (a, b), grad_fn)


def detach(x: Tensor) -> Tensor:
    """Value of ``x`` cut out of the gradient flow."""
    return Tensor(x.data)


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``a`` is (..., k) or (m, k) and ``b`` is a 2-D (k, n) matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2:
        raise DimensionError(f"matmul right operand must be 2-D, got {b.shape}")
    if a.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        da = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, b.shape[1])
        db = a2.T @ g2
        return da, db

    return _make(data, "matmul", (a, b), grad_fn)


def transpose2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose2d expects a matrix, got {x.shape}")
    data = np.ascontiguousarray(x.data.T)

    def grad_fn(g):
        return (g.T,)

    return _make(data, "transpose", (x,), grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)
    orig = x.shape

    def grad_fn(g):
        return (g.reshape(orig),)

    return _make(data, "reshape", (x,), grad_fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(data, "narrow", (x,), grad_fn)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def grad_fn(g):
        outs = []
        off = 0
        for n in sizes:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(off, off + n)
            outs.append(g[tuple(idx)])
            off += n
        return tuple(outs)

    return _make(data, "concat", parts, grad_fn)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(data, "sum", (x,), grad_fn)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.shape[a] for a in axis]))
    else:
        n = x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# activations

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # both branches evaluate vectorized; the out-of-range exp harmlessly
    # saturates on the side where the other branch is selected
    with np.errstate(over="ignore"):
        ex_neg = np.exp(-np.abs(x))
    pos = 1.0 / (1.0 + ex_neg)
    return np.where(x >= 0, pos, 1.0 - pos)


def _stable_softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _exp_saturating(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        y = np.exp(x)
    if np.isinf(y).any():
        warnings.warn("exp overflow clamped to max finite value", RuntimeWarning)
        y = np.nan_to_num(y, posinf=np.finfo(y.dtype).max)
    return y


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    # name -> (forward, derivative given (x, y))
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "sigmoid": (_stable_sigmoid, lambda x, y: y * (1.0 - y)),
    "silu": (
        lambda x: x * _stable_sigmoid(x),
        lambda x, y: (lambda s: s * (1.0 + x * (1.0 - s)))(_stable_sigmoid(x)),
    ),
    "softplus": (_stable_softplus, lambda x, y: _stable_sigmoid(x)),
    "exp": (_exp_saturating, lambda x, y: y),
}


def activation(kind: str, x) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ContractError(f"unknown activation {kind!r}")
    x = _as_tensor(x)
    fwd, deriv = _ACTIVATIONS[kind]
    data = fwd(x.data)

    def grad_fn(g):
        return (g * deriv(x.data, data),)

    return _make(data, kind, (x,), grad_fn)


def tanh(x) -> Tensor:
    return activation("tanh", x)


def sigmoid(x) -> Tensor:
    return activation("sigmoid", x)


def silu(x) -> Tensor:
    return activation("silu", x)


def softplus(x) -> Tensor:
    return activation("softplus", x)


def exp(x) -> Tensor:
    return activation("exp", x)


def apply_unary(x: Tensor, forward: Callable, grad: Callable, op: str) -> Tensor:
    """Register a custom elementwise op (used for the spiking neuron).

    ``forward(data) -> data`` and ``grad(x_data) -> local derivative``.
    """
    x = _as_tensor(x)
    data = forward(x.data)

    def grad_fn(g):
        return (g * grad(x.data),)

    return _make(data, op, (x,), grad_fn)


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    """Register an op with a hand-written backward (used for the state scan).

    ``grad_fn(g_out)`` must return one gradient per input, in order.
    """
    return _make(data, op, tuple(inputs), grad_fn)


# ---------------------------------------------------------------------------
# softmax family

def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _make(data, "softmax", (x,), grad_fn)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    soft = np.exp(data)

    def grad_fn(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(data, "log_softmax", (x,), grad_fn)


# ---------------------------------------------------------------------------
# normalization

def rmsnorm(x, weight, eps: float) -> Tensor:
    """``x / sqrt(mean(x^2, last) + eps) * weight`` over the last axis."""
    if eps < 0:
        raise ContractError("eps must be >= 0")
    x, weight = _as_tensor(x), _as_tensor(weight)
    d = x.shape[-1]
    if weight.shape != (d,):
        raise DimensionError(f"rmsnorm weight shape {weight.shape} != ({d},)")
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    data = x.data * inv * weight.data

    def grad_fn(g):
        gw = g * weight.data
        s = (gw * x.data).sum(axis=-1, keepdims=True)
        dx = gw * inv - x.data * (inv ** 3) * (s / d)
        dw = (g * x.data * inv).reshape(-1, d).sum(axis=0)
        return dx, dw

    return _make(data, "rmsnorm", (x, weight), grad_fn)


# ---------------------------------------------------------------------------
# causal depthwise convolution (width fixed at 4)

CONV_WIDTH = 4


def causal_conv1d(x, kernel, state: np.ndarray | None = None):
    """Depthwise causal convolution along the time axis.

    ``x`` is (..., T, c); ``kernel`` is (c, w) with w == 4; ``state`` holds
    the previous w-1 inputs per channel, (..., w-1, c), zeros at sequence
    start. Returns ``(y, state')`` where ``state'`` (plain array) lets a
    caller resume step-by-step with identical results.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    c, w = kernel.shape
    if w != CONV_WIDTH:
        raise DimensionError(f"conv kernel width must be {CONV_WIDTH}, got {w}")
    if x.shape[-1] != c:
        raise DimensionError(f"conv channel mismatch: x has {x.shape[-1]}, kernel {c}")
    T = x.shape[-2]
    lead = x.shape[:-2]
    if state is None:
        state = np.zeros(lead + (w - 1, c), dtype=x.data.dtype)
    if state.shape != lead + (w - 1, c):
        raise DimensionError(f"conv state shape {state.shape} != {lead + (w - 1, c)}")

    xp = np.concatenate([state, x.data], axis=-2)
    data = np.zeros_like(x.data)
    for j in range(w):  # ascending taps, matches the stepwise accumulation order
        data = data + kernel.data[:, j] * xp[..., j:j + T, :]
    new_state = xp[..., T:, :].copy()

    def grad_fn(g):
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(kernel.data)
        for j in range(w):
            win = xp[..., j:j + T, :]
            dk[:, j] = (g * win).reshape(-1, c).sum(axis=0)
            dxp[..., j:j + T, :] += g * kernel.data[:, j]
        return dxp[..., w - 1:, :], dk

    return _make(data, "conv1d", (x, kernel), grad_fn), new_state


def causal_conv1d_step(x_t: np.ndarray, kernel: np.ndarray, state: np.ndarray):
    """One inference step of the causal conv; plain arrays, no tape.

    ``x_t`` is (..., c); returns ``(y_t, state')``.
    """
    c, w = kernel.shape
    window = np.concatenate([state, x_t[..., None, :]], axis=-2)
    y = np.zeros_like(x_t)
    for j in range(w):
        y = y + kernel[:, j] * window[..., j, :]
    return y, window[..., 1:, :].copy()


# ---------------------------------------------------------------------------
# embedding gather

def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(f"token id out of range [0, {weight.shape[0]})")
    data = weight.data[ids]

    def grad_fn(g):
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (dw,)

    return _make(data, "embedding", (weight,), grad_fn)
