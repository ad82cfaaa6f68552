"""Small reverse-mode automatic differentiation engine over dense float64 arrays.

A :class:`Graph` is a tape. Operations on :class:`Tensor` objects that belong
to a recording graph append a node holding the op's vector-Jacobian product
(VJP). Most VJPs are written with the same differentiable operations, so a
backward pass can itself be recorded (``create_graph=True``) and
differentiated again. This double backpropagation is what the gradient
penalty of a WGAN-GP critic needs.

Batch normalization, the signed leaky activation and softmax only carry a
first-order VJP: they never sit on the critic path, and asking for a
second-order pass through them raises :class:`UnsupportedSecondOrderError`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "DimensionError",
    "DegenerateBatchError",
    "DetachedNodeError",
    "NonScalarOutputError",
    "UnsupportedSecondOrderError",
    "Tensor",
    "Graph",
    "Parameter",
    "ActivationSpec",
    "affine",
    "batch_norm",
    "activate",
    "leaky_relu",
    "slr",
    "softmax",
    "concat",
    "dropout",
    "dropout_mask",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "square",
    "sqrt",
    "sum",
    "mean",
    "slice_cols",
    "transpose",
    "backward",
    "input_gradient",
    "adam_step",
]

DTYPE = np.float64


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class DimensionError(AutodiffError, ValueError):
    pass


class DegenerateBatchError(AutodiffError, ValueError):
    pass


class DetachedNodeError(AutodiffError):
    pass


class NonScalarOutputError(AutodiffError, ValueError):
    pass


class UnsupportedSecondOrderError(AutodiffError):
    pass


class Parameter:
    """A trainable array together with its Adam moment estimates."""

    __slots__ = ("name", "value", "m", "v", "t")

    def __init__(self, value, name: str = ""):
        self.name = name
        self.value = np.array(value, dtype=DTYPE)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.t = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tensor:
    """Array value plus an optional handle into the graph that produced it."""

    __slots__ = ("values", "graph", "node_id")

    def __init__(self, values, graph: Graph | None = None, node_id: int | None = None):
        self.values = np.asarray(values, dtype=DTYPE)
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


VJP = Callable[[Tensor, Sequence[bool]], Sequence["Tensor | None"]]


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    vjp: VJP | None
    second_order: bool = True


@dataclass
class Graph:
    """Ordered tape of nodes; inputs of a node always precede it."""

    nodes: list[Node] = field(default_factory=list)
    params: dict[int, Parameter] = field(default_factory=dict)
    recording: bool = True
    _param_nodes: dict[int, int] = field(default_factory=dict)

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def input(self, values) -> Tensor:
        """Record a leaf for data whose gradient may be requested."""
        nid = self._append(Node("input", (), None))
        return Tensor(values, self, nid)

    def param(self, p: Parameter) -> Tensor:
        """Leaf tensor for a parameter; one leaf per parameter per graph."""
        nid = self._param_nodes.get(id(p))
        if nid is None:
            nid = self._append(Node("param", (), None))
            self._param_nodes[id(p)] = nid
            self.params[nid] = p
        return Tensor(p.value, self, nid)

    @contextlib.contextmanager
    def paused(self):
        prev = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _graph_of(tensors: Iterable[Tensor]) -> Graph | None:
    g = None
    for t in tensors:
        if t.node_id is not None:
            if g is None:
                g = t.graph
            elif t.graph is not g:
                raise AutodiffError("tensors from different graphs combined")
    return g


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: VJP,
            second_order: bool = True) -> Tensor:
    g = _graph_of(inputs)
    if g is None or not g.recording:
        return Tensor(value)
    ids = tuple(-1 if t.node_id is None else t.node_id for t in inputs)
    nid = g._append(Node(op, ids, vjp, second_order))
    return Tensor(value, g, nid)


def _unbroadcast(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast gradient back down to ``shape``."""
    out = grad
    while out.values.ndim > len(shape):
        out = sum(out, axis=0)
    for ax, (a, b) in enumerate(zip(out.shape, shape)):
        if a != b:
            out = sum(out, axis=ax, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# differentiable primitives (second-order capable)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape

    def vjp(g, needs):
        return (reshape(g, src),)

    return _record("reshape", x.values.reshape(shape), (x,), vjp)


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape

    def vjp(g, needs):
        return (_unbroadcast(g, src),)

    return _record("broadcast", np.broadcast_to(x.values, shape).copy(), (x,), vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _record("add", a.values + b.values, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(neg(g), b.shape) if needs[1] else None)

    return _record("sub", a.values - b.values, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.values, (a,), lambda g, needs: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g, needs):
        return (_unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast(mul(g, a), b.shape) if needs[1] else None)

    return _record("mul", a.values * b.values, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_val = a.values / b.values

    def vjp(g, needs):
        ga = _unbroadcast(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _record("div", out_val, (a, b), vjp)


def square(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, needs):
        return (mul(mul(g, a), 2.0),)

    return _record("square", a.values * a.values, (a,), vjp)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    val = np.sqrt(a.values)
    out_holder: list[Tensor] = []

    def vjp(g, needs):
        return (div(mul(g, 0.5), out_holder[0]),)

    out = _record("sqrt", val, (a,), vjp)
    out_holder.append(out)
    return out


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    src = a.shape
    val = np.sum(a.values, axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            kept = list(src)
            kept[axis] = 1
            g = reshape(g, tuple(kept))
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(src))
        return (broadcast_to(g, src),)

    return _record("sum", val, (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _record("transpose", a.values.T, (a,), lambda g, needs: (transpose(g),))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _record("matmul", a.values @ b.values, (a, b), vjp)


def affine(x, W, b) -> Tensor:
    """Dense layer ``x @ W + b`` recorded as a single node."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if (x.values.ndim != 2 or W.values.ndim != 2 or x.shape[1] != W.shape[0]
            or b.shape != (W.shape[1],)):
        raise DimensionError(
            f"affine shape mismatch: x{x.shape}, W{W.shape}, b{b.shape}")

    def vjp(g, needs):
        gx = matmul(g, transpose(W)) if needs[0] else None
        gW = matmul(transpose(x), g) if needs[1] else None
        gb = sum(g, axis=0) if needs[2] else None
        return gx, gW, gb

    return _record("affine", x.values @ W.values + b.values, (x, W, b), vjp)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    width = x.shape[-1]

    def vjp(g, needs):
        return (pad_cols(g, start, width - stop),)

    return _record("slice", x.values[:, start:stop].copy(), (x,), vjp)


def pad_cols(x, left: int, right: int) -> Tensor:
    x = _as_tensor(x)
    n, w = x.shape
    val = np.zeros((n, left + w + right), dtype=DTYPE)
    val[:, left:left + w] = x.values

    def vjp(g, needs):
        return (slice_cols(g, left, left + w),)

    return _record("pad", val, (x,), vjp)


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the last axis, in argument order."""
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty list")
    n = xs[0].shape[0]
    for x in xs:
        if x.values.ndim != 2 or x.shape[0] != n:
            raise DimensionError(
                f"concat leading-dimension mismatch: {[x.shape for x in xs]}")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def vjp(g, needs):
        return tuple(slice_cols(g, int(bounds[i]), int(bounds[i + 1])) if needs[i] else None
                     for i in range(len(xs)))

    return _record("concat", np.concatenate([x.values for x in xs], axis=1), xs, vjp)


def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    slope = (x.values > 0) * (1.0 - alpha) + alpha
    # slope is piecewise constant, so the VJP is linear in g and itself differentiable
    return _record("leaky_relu", x.values * slope, (x,),
                   lambda g, needs: (mul(g, slope),))


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x, rate: float, mode: str = "train", rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None) -> Tensor:
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("train-mode dropout needs a seeded rng or a mask")
        mask = dropout_mask(x.shape, rate, rng)
    return _record("dropout", x.values * mask, (x,), lambda g, needs: (mul(g, mask),))


# ---------------------------------------------------------------------------
# first-order-only primitives


def _first_order(op: str, value, inputs, numpy_vjp) -> Tensor:
    def vjp(g, needs):
        if g.tracked:
            raise UnsupportedSecondOrderError(
                f"op '{op}' does not support second-order differentiation")
        return tuple(None if r is None else Tensor(r) for r in numpy_vjp(g.values, needs))

    return _record(op, value, inputs, vjp, second_order=False)


def batch_norm(x, gamma, beta, mode: str = "train", running_mean=None, running_var=None,
               eps: float = 1e-5) -> Tensor:
    """Normalize columns by batch (train) or running (infer) statistics."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xv = x.values
    if xv.ndim != 2 or gamma.shape != (xv.shape[1],) or beta.shape != (xv.shape[1],):
        raise DimensionError(
            f"batch_norm shape mismatch: x{x.shape}, gamma{gamma.shape}, beta{beta.shape}")
    if mode == "train":
        n = xv.shape[0]
        if n < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs >= 2 rows, got {n}")
        mu = xv.mean(axis=0)
        var = xv.var(axis=0)
    elif mode == "infer":
        mu = np.asarray(running_mean, dtype=DTYPE)
        var = np.asarray(running_var, dtype=DTYPE)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv_std
    gv = gamma.values
    out = xhat * gv + beta.values

    def numpy_vjp(g, needs):
        dx = None
        if needs[0]:
            dxhat = g * gv
            if mode == "train":
                n = g.shape[0]
                dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                      - xhat * (dxhat * xhat).sum(axis=0))
            else:
                dx = dxhat * inv_std
        dgamma = (g * xhat).sum(axis=0) if needs[1] else None
        dbeta = g.sum(axis=0) if needs[2] else None
        return dx, dgamma, dbeta

    return _first_order("batch_norm", out, (x, gamma, beta), numpy_vjp)


def slr(x, p, q, sign: int = 1) -> Tensor:
    """Signed leaky activation: slope p where sign*x >= 0, slope q elsewhere."""
    x, p, q = _as_tensor(x), _as_tensor(p), _as_tensor(q)
    xv = x.values
    side = (sign * xv) >= 0
    pv, qv = float(p.values), float(q.values)
    slope = side * (pv - qv) + qv
    out = xv * slope

    def numpy_vjp(g, needs):
        dx = g * slope if needs[0] else None
        gx = g * xv
        dp = np.asarray(gx[side].sum()) if needs[1] else None
        dq = np.asarray(gx[~side].sum()) if needs[2] else None
        return dx, dp, dq

    return _first_order("slr", out, (x, p, q), numpy_vjp)


def softmax(x) -> Tensor:
    x = _as_tensor(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def numpy_vjp(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _first_order("softmax", y, (x,), numpy_vjp)


@dataclass(frozen=True)
class ActivationSpec:
    kind: str  # "leaky_relu" | "slr" | "softmax"
    sign: int = 1
    alpha: float = 0.2

    def __post_init__(self):
        if self.kind not in ("leaky_relu", "slr", "softmax"):
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.sign not in (1, -1):
            raise ValueError("SLR sign must be +1 or -1")


def activate(spec: ActivationSpec, x, slopes: tuple | None = None) -> Tensor:
    if spec.kind == "leaky_relu":
        return leaky_relu(x, spec.alpha)
    if spec.kind == "softmax":
        return softmax(x)
    if slopes is None:
        raise ValueError("SLR activation needs its (p, q) slope tensors")
    return slr(x, slopes[0], slopes[1], spec.sign)


# ---------------------------------------------------------------------------
# reverse sweep


def _ancestors(g: Graph, out_id: int) -> set[int]:
    seen = {out_id}
    stack = [out_id]
    nodes = g.nodes
    while stack:
        nid = stack.pop()
        for i in nodes[nid].inputs:
            if i >= 0 and i not in seen:
                seen.add(i)
                stack.append(i)
    return seen


def _reverse(out: Tensor, sources: set[int], create_graph: bool) -> dict[int, Tensor]:
    g = out.graph
    if out.node_id is None or g is None:
        raise DetachedNodeError("output is not recorded on any graph")
    if out.values.size != 1:
        raise NonScalarOutputError(f"backward needs a scalar output, got shape {out.shape}")
    anc = _ancestors(g, out.node_id)
    # nodes that lie on a path from a source to the output
    needed: set[int] = set()
    for nid in sorted(anc):
        if nid in sources or any(i in needed for i in g.nodes[nid].inputs):
            needed.add(nid)
    grads: dict[int, Tensor] = {out.node_id: Tensor(np.ones_like(out.values))}
    ctx = contextlib.nullcontext() if create_graph else g.paused()
    with ctx:
        for nid in range(out.node_id, -1, -1):
            if nid not in needed or nid not in grads:
                continue
            node = g.nodes[nid]
            if node.vjp is None:
                continue
            gout = grads[nid]
            if nid not in sources:
                del grads[nid]
            needs = [i >= 0 and i in needed for i in node.inputs]
            if not any(needs):
                continue
            if create_graph and not node.second_order:
                raise UnsupportedSecondOrderError(
                    f"op '{node.op}' does not support second-order differentiation")
            in_grads = node.vjp(gout, needs)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None or i < 0 or i not in needed:
                    continue
                prev = grads.get(i)
                grads[i] = gi if prev is None else add(prev, gi)
    return grads


def backward(out: Tensor, inputs: Sequence[Tensor] = (),
             params: Sequence[Parameter] | None = None) -> dict:
    """Gradients of a scalar output.

    Returns a map from each registered :class:`Parameter` (or only those in
    ``params``) to its gradient array; parameters the output does not depend
    on get zeros. Tensors listed in ``inputs`` are added keyed by node id.
    """
    g = out.graph
    if g is None or out.node_id is None:
        raise DetachedNodeError("output is not recorded on any graph")
    for t in inputs:
        if t.node_id is None or t.graph is not g:
            raise DetachedNodeError("requested input is not on the output's graph")
    if params is None:
        wanted = dict(g.params)
    else:
        wanted = {g._param_nodes[id(p)]: p for p in params if id(p) in g._param_nodes}
    sources = set(wanted) | {t.node_id for t in inputs}
    grads = _reverse(out, sources, create_graph=False)
    result: dict = {}
    for nid, p in wanted.items():
        gr = grads.get(nid)
        result[p] = np.zeros_like(p.value) if gr is None else np.array(gr.values)
    if params is not None:
        for p in params:
            result.setdefault(p, np.zeros_like(p.value))
    for t in inputs:
        gr = grads.get(t.node_id)
        result[t.node_id] = np.zeros_like(t.values) if gr is None else np.array(gr.values)
    return result


def input_gradient(out: Tensor, x: Tensor, create_graph: bool = True) -> Tensor:
    """Gradient of scalar ``out`` w.r.t. ``x`` as a differentiable graph node."""
    if x.node_id is None or x.graph is not out.graph:
        raise DetachedNodeError("input is not on the output's graph")
    grads = _reverse(out, {x.node_id}, create_graph=create_graph)
    gr = grads.get(x.node_id)
    if gr is None:
        return Tensor(np.zeros_like(x.values))
    return gr


def adam_step(params: Sequence[Parameter], grads, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; ``grads`` maps Parameter -> array."""
    for p in params:
        g = np.asarray(grads[p], dtype=DTYPE)
        if g.shape != p.value.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter {p.name!r} {p.shape}")
        p.t += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.t)
        v_hat = p.v / (1.0 - beta2 ** p.t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
