"""Dense tensors with reverse-mode autodiff on a flat tape.

The op set is closed and small: everything the decoder model needs is either
an op here or composed from them. Ops record onto the active Graph (one per
thread); with no active graph they are plain numpy and cost nothing extra,
which is the inference path. Gradients accumulate in a fixed reverse order,
so two backward passes over identical inputs are bit-identical.
"""

from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


def _active_graph() -> "Graph | None":
    return getattr(_local, "graph", None)


class Tensor:
    """A numpy array plus gradient slot.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    ``Graph.backward``. Non-leaf tensors produced by ops inherit the flag.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        elif arr.dtype.kind not in "fiu":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # ``own`` means g is a fresh array we may mutate; otherwise copy on
        # first touch, since backward rules can hand out views of shared data
        if self.grad is None:
            if own and g.shape == self.data.shape and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype)
                if self.grad.shape != self.data.shape:
                    self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Node:
    """One recorded op: output, inputs, and the rule producing input grads."""

    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Tape of op records in construction (= topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        if _active_graph() is not None:
            raise RuntimeError("a Graph is already active on this thread")
        _local.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _local.graph = None

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every requires_grad tensor reachable from loss.

        Accumulation walks the tape strictly in reverse construction order,
        so results are deterministic.
        """
        if loss.size != 1:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
        loss._accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is not None and inp.requires_grad:
                    # a fresh (owning) array distinct from g can be adopted
                    # outright; anything else gets copied on first touch
                    inp._accumulate(gi, own=gi is not g and gi.flags.owndata)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.nodes.append(Node(out, inputs, backward))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or batched 3-D (leading stack dims must match)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data * x.dtype.type(c))

    def backward(g):
        return (g * x.dtype.type(c),)

    return _record(out, (x,), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))

    def backward(g):
        return (g * (x.data > 0),)

    return _record(out, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Probability vectors along the last axis, max-subtracted for stability."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (x,), backward)


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) along the last axis (axis dropped), stabilized."""
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = Tensor((m + np.log(s)).squeeze(-1))

    def backward(g):
        return (np.expand_dims(g, -1) * (e / s),)

    return _record(out, (x,), backward)


RMSNORM_EPS = 1e-6


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != x.shape[-1:]:
        raise ValueError(f"rmsnorm gain shape {gain.shape} does not match last axis of {x.shape}")
    n = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + RMSNORM_EPS)
    xn = x.data * inv
    out = Tensor(xn * gain.data)

    def backward(g):
        dz = g * gain.data
        dot = (dz * x.data).sum(axis=-1, keepdims=True)
        dx = inv * dz - x.data * (inv**3 / n) * dot
        dgain = (xn * g).reshape(-1, n).sum(axis=0)
        return dx, dgain

    return _record(out, (x, gain), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[i] = table[ids[i]]."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-overlapping) slicing/indexing of a tensor view as a new tensor."""
    x = as_tensor(x)
    out = Tensor(np.array(x.data[key]))

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _record(out, (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.transpose(x.data, axes))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record(out, (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), backward)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (even, odd) channel pairs by per-position angles.

    cos/sin must broadcast against x[..., 0::2] (e.g. [T, 1, head_dim/2] for a
    [T, heads, head_dim] input). The rotation is orthogonal, so the backward
    pass is the transposed rotation.
    """
    x = as_tensor(x)
    x1, x2 = x.data[..., 0::2], x.data[..., 1::2]
    y = np.empty_like(x.data)
    y[..., 0::2] = x1 * cos - x2 * sin
    y[..., 1::2] = x1 * sin + x2 * cos
    out = Tensor(y)

    def backward(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        return (gx,)

    return _record(out, (x,), backward)


def take_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather x[rows[i], cols[i], :] from a 3-D tensor into [K, last_dim]."""
    x = as_tensor(x)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = Tensor(x.data[rows, cols])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _record(out, (x,), backward)


def pick(x: Tensor, cols: np.ndarray) -> Tensor:
    """Gather x[i, cols[i]] from a 2-D tensor into [K]."""
    x = as_tensor(x)
    cols = np.asarray(cols)
    rows = np.arange(len(cols))
    out = Tensor(x.data[rows, cols])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _record(out, (x,), backward)


def sum_(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.asarray(x.data.sum()))

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward)


def mean_(x: Tensor) -> Tensor:
    return scale(sum_(x), 1.0 / as_tensor(x).size)


def stack_scalars(xs: list[Tensor]) -> Tensor:
    """Stack 0-d tensors into a vector (used to average per-position losses)."""
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.stack([x.data.reshape(()) for x in xs]))

    def backward(g):
        return tuple(np.asarray(gi) for gi in g)

    return _record(out, tuple(xs), backward)
