"""Dense float64 tensors with reverse-mode automatic differentiation.

The design is a recording tape: while a :class:`Graph` is active, every
primitive appends one node (operands, outputs, backward rule) in execution
order, which is already a topological order. ``Graph.backward`` walks the
tape in reverse and accumulates gradients into the trainable leaves.

Scope is deliberately small: 1-D/2-D dense float64 arrays, the primitives
needed by a recurrent CVAE (matmul, elementwise arithmetic, activations,
reductions, concat/slice), a fused LSTM cell with a hand-written backward,
and Adam with global-norm gradient clipping. No broadcasting beyond what
bias addition and scalar arithmetic need.
"""

from __future__ import annotations

import hashlib
import json
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(
            f"{op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}"
        )


class NotScalarLoss(ValueError):
    """Raised when backward() is asked to differentiate a non-scalar."""


_GRAPH_STACK: list["Graph"] = []


def active_graph() -> "Graph | None":
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    Tensors are value-like: public ops never mutate an existing tensor's
    data. The one sanctioned exception is the optimizer, which updates
    parameter tensors in place between graph recordings.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor '{name or 'unnamed'}' contains non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all routing through the recorded primitives below.
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded primitive: outputs, operands, and a backward rule.

    ``backward_fn`` receives one gradient array per output (zeros when an
    output did not reach the loss) and returns one array or None per parent.
    """

    __slots__ = ("outs", "parents", "backward_fn")

    def __init__(self, outs, parents, backward_fn):
        self.outs = outs
        self.parents = parents
        self.backward_fn = backward_fn


class Graph:
    """Recording tape. Nodes appear in execution order, hence topologically.

    Use as a context manager around the forward pass::

        with Graph() as g:
            loss = ...
        g.backward(loss)

    Outside any active graph, primitives run plain (no recording), which is
    the inference fast path.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _GRAPH_STACK.pop()
        return False

    def record(self, outs: tuple[Tensor, ...], parents: tuple[Tensor, ...], backward_fn) -> None:
        for p in parents:
            if p.requires_grad and id(p) not in self._produced:
                self._leaves[id(p)] = p
        for o in outs:
            self._produced.add(id(o))
        self.nodes.append(Node(outs, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every trainable leaf reachable from ``loss``.

        Leaf gradients accumulate (+=) across calls; intermediate gradients
        are transient. Trainable leaves with no path to the loss get zeros.
        """
        if loss.data.size != 1:
            raise NotScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gouts = []
            live = False
            for o in node.outs:
                g = grads.pop(id(o), None)
                if g is None:
                    g = np.zeros_like(o.data)
                else:
                    live = True
                gouts.append(g)
            if not live:
                continue
            pgrads = node.backward_fn(*gouts)
            for p, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            if g is not None:
                leaf.grad += g.reshape(leaf.data.shape)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    g = active_graph()
    if needs and g is not None:
        g.record((out,), parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- primitives -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)
    data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, (a, b), bwd)


def _broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(op, a.data.shape, b.data.shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "sub")

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "multiply")

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _result(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        return (g * s,)

    return _result(a.data * s, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _result(y, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _result(y, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bwd(g):
        return (g * y,)

    return _result(y, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log: operand must be strictly positive")
    def bwd(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    y = np.logaddexp(0.0, a.data)

    def bwd(g):
        return (g * _sigmoid(a.data),)

    return _result(y, (a,), bwd)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    data = np.mean(a.data, axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.full_like(a.data, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.data.shape).copy(),)

    return _result(np.asarray(data), (a,), bwd)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    data = np.sum(a.data, axis=axis)

    def bwd(g):
        if axis is None:
            return (np.full_like(a.data, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _result(np.asarray(data), (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ValueError("concat: empty input")
    data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = [0]
    for p in parts:
        offsets.append(offsets[-1] + p.data.shape[axis])

    def bwd(g):
        sl = [builtins_slice_all] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _result(data, tuple(parts), bwd)


builtins_slice_all = slice(None)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.data.shape[axis]):
        raise ShapeMismatch("slice", a.data.shape, (start, stop))
    key = [builtins_slice_all] * a.data.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _result(a.data[key], (a,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-safe via sigmoid(x) = (tanh(x/2) + 1) / 2; single ufunc pass
    out = np.tanh(x * 0.5)
    out += 1.0
    out *= 0.5
    return out


# --- fused LSTM cell --------------------------------------------------------

# Gate layout in the fused weight matrix: [input, forget, output, candidate],
# so the first 3H pre-activation columns take sigmoid and the last H tanh.


def _gate_backward_numpy(gates, c_prev, tanh_c, gh, gc):
    hsz = gates.shape[1] // 4
    i = gates[:, :hsz]
    f = gates[:, hsz : 2 * hsz]
    o = gates[:, 2 * hsz : 3 * hsz]
    g = gates[:, 3 * hsz :]
    gc_tot = np.square(tanh_c)
    np.subtract(1.0, gc_tot, out=gc_tot)
    gc_tot *= o
    gc_tot *= gh
    gc_tot += gc
    gpre = np.empty_like(gates)
    gpre_i = gpre[:, :hsz]
    gpre_f = gpre[:, hsz : 2 * hsz]
    gpre_o = gpre[:, 2 * hsz : 3 * hsz]
    gpre_g = gpre[:, 3 * hsz :]
    # d(pre_i) = gc_tot * g * i * (1 - i), and analogously for f, o, g
    np.multiply(gc_tot, g, out=gpre_i)
    gpre_i *= i
    gpre_i -= gpre_i * i
    np.multiply(gc_tot, c_prev, out=gpre_f)
    gpre_f *= f
    gpre_f -= gpre_f * f
    np.multiply(gh, tanh_c, out=gpre_o)
    gpre_o *= o
    gpre_o -= gpre_o * o
    np.multiply(gc_tot, i, out=gpre_g)
    gpre_g -= gpre_g * (g * g)
    gc_tot *= f
    return gpre, gc_tot


try:
    from ._kernels import HAVE_NUMBA, gate_backward as _gate_backward_numba
except Exception:  # pragma: no cover
    HAVE_NUMBA = False
    _gate_backward_numba = None

_gate_backward = _gate_backward_numba if HAVE_NUMBA else _gate_backward_numpy


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step. ``w`` is ((input+hidden) x 4*hidden), ``b`` is (4*hidden,).

    Fused: the whole cell is a single tape node with an analytic backward,
    which keeps desk-scale training fast. Gradients are validated against
    finite differences in the test suite.
    """
    bsz, isz = x.data.shape
    hsz = h_prev.data.shape[1]
    if h_prev.data.shape != (bsz, hsz) or c_prev.data.shape != (bsz, hsz):
        raise ShapeMismatch("lstm_cell", x.data.shape, h_prev.data.shape, c_prev.data.shape)
    if w.data.shape != (isz + hsz, 4 * hsz) or b.data.shape != (4 * hsz,):
        raise ShapeMismatch("lstm_cell", w.data.shape, b.data.shape)

    xh = np.concatenate([x.data, h_prev.data], axis=1)
    pre = xh @ w.data
    pre += b.data
    gates = np.empty_like(pre)
    sig = gates[:, : 3 * hsz]
    np.multiply(pre[:, : 3 * hsz], 0.5, out=sig)
    np.tanh(sig, out=sig)
    sig += 1.0
    sig *= 0.5
    np.tanh(pre[:, 3 * hsz :], out=gates[:, 3 * hsz :])
    i = gates[:, :hsz]
    f = gates[:, hsz : 2 * hsz]
    o = gates[:, 2 * hsz : 3 * hsz]
    g = gates[:, 3 * hsz :]
    c_new = f * c_prev.data
    c_new += i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c

    h_out = Tensor.__new__(Tensor)
    h_out.data, h_out.grad, h_out.name = h_new, None, None
    c_out = Tensor.__new__(Tensor)
    c_out.data, c_out.grad, c_out.name = c_new, None, None
    needs = x.requires_grad or h_prev.requires_grad or c_prev.requires_grad or w.requires_grad or b.requires_grad
    h_out.requires_grad = needs
    c_out.requires_grad = needs

    graph = active_graph()
    if needs and graph is not None:

        def bwd(gh, gc):
            gpre, gc_prev = _gate_backward(gates, c_prev.data, tanh_c, gh, gc)
            gxh = gpre @ w.data.T
            gw = xh.T @ gpre
            gb = gpre.sum(axis=0)
            return gxh[:, :isz], gxh[:, isz:], gc_prev, gw, gb

        graph.record((h_out, c_out), (x, h_prev, c_prev, w, b), bwd)
    return h_out, c_out


# --- parameter init and Adam ------------------------------------------------


def init_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def init_zeros(shape: tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_gradients_(params: Sequence[Tensor], clip_norm: float) -> float:
    """Scale all gradients in place so their global norm is at most clip_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > clip_norm and norm > 0.0:
        factor = clip_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class Adam:
    """Bias-corrected Adam with global-norm gradient clipping before each step."""

    def __init__(
        self,
        params: dict[str, Tensor],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        clip_norm: float = 1.0,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.clip_norm = clip_norm
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.second_moment = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> float:
        """Apply one update from the grads currently on the parameters."""
        pre_norm = clip_gradients_(list(self.params.values()), self.clip_norm)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            p.data -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
        return pre_norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "clip_norm": self.clip_norm,
            "first_moment": {k: v.copy() for k, v in self.first_moment.items()},
            "second_moment": {k: v.copy() for k, v in self.second_moment.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self.learning_rate = float(state["learning_rate"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.epsilon = float(state["epsilon"])
        self.clip_norm = float(state["clip_norm"])
        for k in self.first_moment:
            self.first_moment[k][...] = state["first_moment"][k]
            self.second_moment[k][...] = state["second_moment"][k]


def config_fingerprint(config: dict) -> str:
    """Stable sha256 of a JSON-serializable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
