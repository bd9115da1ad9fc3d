"""Dense float64 tensors with reverse-mode automatic differentiation.

A small dynamic-graph engine: every primitive wraps a numpy call and, when
any input is tracked, records its parents plus a vector-Jacobian product.
Graphs are rebuilt on each forward pass and freed together with the output,
so there is no global tape to reset. Everything is float64; quantization
error analysis needs headroom well below float32 rounding noise.

Gradient accumulation is explicit: ``backward`` adds into ``Tensor.grad``
and callers zero grads between steps.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling/eval paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array, optionally tracked by the autodiff graph.

    Data is immutable by convention once created; parameters are mutated
    only through explicit in-place updates in the training loops, which is
    why read-only sharing across threads is safe.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; subtraction lowers to add + scale so the primitive
    # set stays minimal.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _lift(op: str, parents: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    """Create the output node, recording parents when gradients are on.

    ``vjp`` maps the output cotangent to one cotangent per parent (``None``
    for parents that do not require grad). Exposed for modules that add
    custom-gradient ops (e.g. straight-through quantization).
    """
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _lift("matmul", (a, b), out, vjp)


def _ewise(op: str, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} vs {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(vjp_a(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(vjp_b(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _lift(op, (a, b), out, vjp)


def add(a, b) -> Tensor:
    return _ewise("add", a, b, lambda x, y: x + y,
                  lambda g, x, y: g, lambda g, x, y: g)


def mul(a, b) -> Tensor:
    return _ewise("mul", a, b, lambda x, y: x * y,
                  lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _ewise("div", a, b, lambda x, y: x / y,
                  lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def affine(x, w, b) -> Tensor:
    """x @ w + b with a (out,)-shaped bias; the denoiser's layer primitive."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] \
            or b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"affine: incompatible shapes x={x.shape} w={w.shape} b={b.shape}")
    out = x.data @ w.data + b.data

    def vjp(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _lift("affine", (x, w, b), out, vjp)


def silu(x) -> Tensor:
    """x * sigmoid(x); the model's sole nonlinearity."""
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def vjp(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _lift("silu", (x,), out, vjp)


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(np.float64),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _lift("sum", (x,), out, vjp)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis)
    n = x.data.size if axis is None else x.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).astype(np.float64),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),)

    return _lift("mean", (x,), out, vjp)


def square(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (2.0 * x.data * g,)

    return _lift("square", (x,), x.data * x.data, vjp)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _lift("exp", (x,), out, vjp)


def log(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (g / x.data,)

    return _lift("log", (x,), np.log(x.data), vjp)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _lift("sqrt", (x,), out, vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i, t in enumerate(ts):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                pieces.append(g[tuple(sl)])
            else:
                pieces.append(None)
        return tuple(pieces)

    return _lift("concat", ts, out, vjp)


def tslice(x, key) -> Tensor:
    """Basic or integer-array indexing; integer gathers accumulate on backward."""
    x = as_tensor(x)
    out = x.data[key]
    if isinstance(out, np.ndarray):
        out = out.copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _lift("slice", (x,), out, vjp)


def broadcast(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from exc

    def vjp(g):
        return (_unbroadcast(g, x.shape),)

    return _lift("broadcast", (x,), out, vjp)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "div": div,
    "affine": affine,
    "silu": silu,
    "sum": tsum,
    "mean": tmean,
    "square": square,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "concat": concat,
    "slice": tslice,
    "broadcast": broadcast,
}


def primitive_forward(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch a primitive by name; mostly a hook for generic testing."""
    if kind not in _PRIMITIVES:
        raise ContractError(f"unknown primitive kind {kind!r}")
    fn = _PRIMITIVES[kind]
    if kind in ("concat",):
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Graph traversal and backward
# ---------------------------------------------------------------------------

class ComputeGraph:
    """Topologically ordered view of the nodes reachable from an output.

    ``nodes`` lists every recorded node with parents preceding children;
    ``leaves`` are the reachable tensors that require grad but were not
    produced by an op (the parameters).
    """

    def __init__(self, nodes: list[Tensor], leaves: list[Tensor]):
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._vjp is None:
                if node.requires_grad:
                    leaves.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return cls(order, leaves)


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into ``.grad`` of every reachable leaf and returns a map
    from parameter to this call's gradient contribution. Parameters passed
    in ``params`` that the loss never touched get explicit zeros.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    graph = ComputeGraph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    for leaf in graph.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.accumulate_grad(g)
        result[leaf] = g
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    return result
