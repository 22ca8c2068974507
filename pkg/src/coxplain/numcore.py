"""Dense float64 arithmetic, a define-then-run reverse-mode graph, and Adam.

Architectures are expressed once as a :class:`Graph` of primitive nodes.
``forward`` binds named inputs and parameters, evaluates every node in
creation order (which is a topological order by construction) and caches the
values; ``backward`` walks the same list in reverse and returns gradients for
every parameter leaf.

Arrays are plain ``numpy.ndarray`` in float64. A "matrix" is 2-D; token-level
ops (attention) also accept a single leading batch axis, i.e. ``(n, t, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DTYPE = np.float64


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based Philox stream addressed by ``(seed, *keys)``.

    Streams with distinct key tuples are statistically independent, so work can
    be scheduled in any order without changing the draws.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


class GraphError(ValueError):
    pass


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None


# ---------------------------------------------------------------------------
# primitive forward / backward rules
#
# forward(vals, attrs, ctx) -> value
# backward(adj, vals, out, attrs, ctx) -> tuple of parent adjoints


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _matmul_fwd(vals, attrs, ctx):
    a, b = vals
    if a.shape[-1] != b.shape[-2]:
        raise GraphError(f"matmul inner dims {a.shape} @ {b.shape}")
    if b.ndim == 3 and a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise GraphError(f"matmul batch dims {a.shape} @ {b.shape}")
    return a @ b


def _matmul_bwd(adj, vals, out, attrs, ctx):
    a, b = vals
    ga = adj @ _swap(b)
    gb = _swap(a) @ adj
    return _sum_to(ga, a.shape), _sum_to(gb, b.shape)


def _add_fwd(vals, attrs, ctx):
    a, b = vals
    if a.shape == b.shape:
        return a + b
    # row-wise bias only
    if b.ndim == 1 and b.shape[0] == a.shape[-1]:
        return a + b
    raise GraphError(f"add shapes {a.shape} + {b.shape}")


def _add_bwd(adj, vals, out, attrs, ctx):
    a, b = vals
    if a.shape == b.shape:
        return adj, adj
    return adj, adj.reshape(-1, b.shape[0]).sum(axis=0)


def _mul_fwd(vals, attrs, ctx):
    a, b = vals
    if a.shape != b.shape:
        raise GraphError(f"mul shapes {a.shape} * {b.shape}")
    return a * b


def _mul_bwd(adj, vals, out, attrs, ctx):
    a, b = vals
    return adj * b, adj * a


def _concat_fwd(vals, attrs, ctx):
    lead = {v.shape[:-1] for v in vals}
    if len(lead) != 1:
        raise GraphError(f"concat shapes {[v.shape for v in vals]}")
    return np.concatenate(vals, axis=-1)


def _concat_bwd(adj, vals, out, attrs, ctx):
    cuts = np.cumsum([v.shape[-1] for v in vals])[:-1]
    return tuple(np.split(adj, cuts, axis=-1))


def _relu_fwd(vals, attrs, ctx):
    return np.maximum(vals[0], 0.0)


def _relu_bwd(adj, vals, out, attrs, ctx):
    return (adj * (vals[0] > 0.0),)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _sigmoid_fwd(vals, attrs, ctx):
    return sigmoid(vals[0])


def _sigmoid_bwd(adj, vals, out, attrs, ctx):
    return (adj * out * (1.0 - out),)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_fwd(vals, attrs, ctx):
    return softmax(vals[0])


def _softmax_bwd(adj, vals, out, attrs, ctx):
    dot = (adj * out).sum(axis=-1, keepdims=True)
    return (out * (adj - dot),)


def _dropout_fwd(vals, attrs, ctx):
    x = vals[0]
    p = attrs["p"]
    if not ctx["train"] or p == 0.0:
        ctx["masks"][attrs["_id"]] = None
        return x
    rng = ctx["rng"]
    if rng is None:
        raise GraphError("dropout in training mode needs an rng stream")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    ctx["masks"][attrs["_id"]] = mask
    return x * mask


def _dropout_bwd(adj, vals, out, attrs, ctx):
    mask = ctx["masks"][attrs["_id"]]
    return (adj if mask is None else adj * mask,)


def _row_mean_fwd(vals, attrs, ctx):
    return vals[0].mean(axis=-2)


def _row_mean_bwd(adj, vals, out, attrs, ctx):
    x = vals[0]
    g = np.expand_dims(adj, -2) / x.shape[-2]
    return (np.broadcast_to(g, x.shape).copy(),)


def _scale_fwd(vals, attrs, ctx):
    return vals[0] * attrs["c"]


def _scale_bwd(adj, vals, out, attrs, ctx):
    return (adj * attrs["c"],)


def _transpose_fwd(vals, attrs, ctx):
    return _swap(vals[0])


def _transpose_bwd(adj, vals, out, attrs, ctx):
    return (_swap(adj),)


def _reshape_fwd(vals, attrs, ctx):
    x = vals[0]
    shape = (x.shape[0],) + tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise GraphError(f"reshape {x.shape} -> {shape}")
    return x.reshape(shape)


def _reshape_bwd(adj, vals, out, attrs, ctx):
    return (adj.reshape(vals[0].shape),)


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "dropout": (_dropout_fwd, _dropout_bwd),
    "row_mean": (_row_mean_fwd, _row_mean_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
}


class Graph:
    """A fixed computation graph.

    Build it with the op methods, each of which returns an integer node id.
    Leaves are either inputs (bound per call) or parameters (bound from a
    name -> array mapping); both are bound in :func:`forward`.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.params: dict[str, int] = {}
        self.output: int | None = None
        self._values: list[np.ndarray | None] | None = None
        self._ctx: dict | None = None

    def _add(self, op: str, parents: tuple[int, ...], name: str | None = None, **attrs) -> int:
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise GraphError(f"unknown parent node {p}")
        nid = len(self.nodes)
        attrs["_id"] = nid
        self.nodes.append(Node(op, parents, attrs, name))
        return nid

    def input(self, name: str) -> int:
        if name in self.inputs:
            raise GraphError(f"duplicate input {name!r}")
        self.inputs[name] = self._add("input", (), name)
        return self.inputs[name]

    def param(self, name: str) -> int:
        if name in self.params:
            raise GraphError(f"duplicate parameter {name!r}")
        self.params[name] = self._add("param", (), name)
        return self.params[name]

    def matmul(self, a: int, b: int) -> int:
        return self._add("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self._add("add", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._add("mul", (a, b))

    def concat(self, *xs: int) -> int:
        return self._add("concat", tuple(xs))

    def relu(self, x: int) -> int:
        return self._add("relu", (x,))

    def sigmoid(self, x: int) -> int:
        return self._add("sigmoid", (x,))

    def softmax(self, x: int) -> int:
        return self._add("softmax", (x,))

    def dropout(self, x: int, p: float) -> int:
        if not 0.0 <= p < 1.0:
            raise GraphError(f"dropout rate {p} outside [0, 1)")
        return self._add("dropout", (x,), p=float(p))

    def row_mean(self, x: int) -> int:
        return self._add("row_mean", (x,))

    def scale(self, x: int, c: float) -> int:
        return self._add("scale", (x,), c=float(c))

    def transpose(self, x: int) -> int:
        return self._add("transpose", (x,))

    def reshape(self, x: int, *shape: int) -> int:
        """Reshape every row (leading axis kept) to ``shape``."""
        return self._add("reshape", (x,), shape=tuple(shape))

    def linear(self, x: int, prefix: str) -> int:
        """``x @ W + b`` with parameters ``{prefix}.W`` and ``{prefix}.b``."""
        return self.add(self.matmul(x, self.param(f"{prefix}.W")), self.param(f"{prefix}.b"))

    def set_output(self, node: int) -> None:
        self.output = node

    def value(self, node: int) -> np.ndarray:
        if self._values is None or self._values[node] is None:
            raise GraphError("forward has not run")
        return self._values[node]


def forward(graph: Graph, inputs: dict[str, np.ndarray], params: dict[str, np.ndarray],
            *, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Evaluate ``graph`` and cache every intermediate value for ``backward``."""
    if graph.output is None:
        raise GraphError("graph has no output node")
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise GraphError(f"unbound inputs: {sorted(missing)}")
    missing = set(graph.params) - set(params)
    if missing:
        raise GraphError(f"unbound parameters: {sorted(missing)}")
    ctx = {"train": train, "rng": rng, "masks": {}}
    values: list[np.ndarray | None] = [None] * len(graph.nodes)
    for nid, node in enumerate(graph.nodes):
        if node.op == "input":
            values[nid] = np.asarray(inputs[node.name], dtype=DTYPE)
        elif node.op == "param":
            values[nid] = np.asarray(params[node.name], dtype=DTYPE)
        else:
            fwd = OPS[node.op][0]
            try:
                values[nid] = fwd([values[p] for p in node.parents], node.attrs, ctx)
            except GraphError as exc:
                raise GraphError(f"node {nid} ({node.op}): {exc}") from None
    graph._values = values
    graph._ctx = ctx
    return values[graph.output]


def backward(graph: Graph, output_adjoint: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse sweep from the output; returns ``{param name: gradient}``.

    Parameters the output does not depend on get an exact zero gradient.
    """
    if graph._values is None:
        raise GraphError("backward called before forward")
    values = graph._values
    out = values[graph.output]
    output_adjoint = np.asarray(output_adjoint, dtype=DTYPE)
    if output_adjoint.shape != out.shape:
        raise GraphError(f"output adjoint shape {output_adjoint.shape} != {out.shape}")
    adj: list[np.ndarray | None] = [None] * len(graph.nodes)
    adj[graph.output] = output_adjoint
    for nid in range(graph.output, -1, -1):
        node = graph.nodes[nid]
        g = adj[nid]
        if g is None or not node.parents:
            continue
        bwd = OPS[node.op][1]
        grads = bwd(g, [values[p] for p in node.parents], values[nid], node.attrs, graph._ctx)
        for p, gp in zip(node.parents, grads):
            if gp.shape != values[p].shape:
                raise GraphError(f"node {nid} ({node.op}): adjoint shape {gp.shape} "
                                 f"!= value shape {values[p].shape}")
            adj[p] = gp if adj[p] is None else adj[p] + gp
    result = {}
    for name, nid in graph.params.items():
        g = adj[nid]
        result[name] = np.zeros_like(values[nid]) if g is None else g
    return result


@dataclass
class AdamState:
    """Adam with decoupled weight decay (applied after the adaptive step)."""

    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Return updated parameters; ``state`` moments and step are advanced in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise GraphError(f"gradient shape {g.shape} != parameter {name!r} {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            new = new - state.lr * state.weight_decay * new
        out[name] = new
    return out
