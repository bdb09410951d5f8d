"""Computation graphs over small dense vectors.

A :class:`Graph` is an immutable DAG of primitive nodes. Every node carries a
row vector per batch element, so evaluation always works on arrays of shape
``(batch, dim)``. Trainable and fixed arrays live in a named parameter
registry; graphs built from fragments (controller, plant, Lyapunov network)
share parameters by name.

Subgradient convention: at kinks (leaky-ReLU, abs, clamp, min, max) the
backward pass returns the right-hand derivative; for ``min``/``max`` ties the
gradient flows to the first argument.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

LEAKY_SLOPE = 0.1
GRAPH_FORMAT_VERSION = 1

UNARY_OPS = frozenset(
    {"affine", "leaky_relu", "clamp", "sin", "cos", "tan", "abs", "scale",
     "reciprocal", "sum", "l1norm", "quadform", "select"}
)
BINARY_OPS = frozenset({"add", "sub", "mul", "min", "max"})
ALL_OPS = UNARY_OPS | BINARY_OPS | {"input", "constant", "concat"}


class GraphError(ValueError):
    """Raised when a graph is malformed (shape mismatch, unknown op, ...)."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    dim: int
    attrs: Mapping = field(default_factory=dict)


def gram_matrix(R: np.ndarray, eps: float) -> np.ndarray:
    """``eps * I + R^T R``."""
    return eps * np.eye(R.shape[1]) + R.T @ R


def effective_weight(node: Node, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Weight matrix used by an ``affine`` node (resolving the Gram form)."""
    W = params[node.attrs["W"]]
    eps = node.attrs.get("gram_eps")
    if eps is not None:
        return gram_matrix(W, eps)
    return W


def quadform_matrix(node: Node, params: Mapping[str, np.ndarray]) -> np.ndarray:
    return gram_matrix(params[node.attrs["R"]], node.attrs["eps"])


class GraphBuilder:
    """Incremental construction of a :class:`Graph`.

    Methods return integer node ids. Shapes are checked eagerly, so a
    malformed graph never reaches evaluation.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._params: dict[str, np.ndarray] = {}
        self._trainable: set[str] = set()
        self._inputs: list[int] = []
        self._anon = 0

    # -- parameters -------------------------------------------------------
    def param(self, name: str, value, trainable: bool = True) -> str:
        value = _frozen(value)
        if name in self._params:
            if self._params[name].shape != value.shape or not np.array_equal(self._params[name], value):
                raise GraphError(f"parameter {name!r} registered twice with different values")
            if trainable != (name in self._trainable):
                raise GraphError(f"parameter {name!r} registered with conflicting trainability")
            return name
        self._params[name] = value
        if trainable:
            self._trainable.add(name)
        return name

    def _fixed(self, value) -> str:
        name = f"_c{self._anon}"
        while name in self._params:
            self._anon += 1
            name = f"_c{self._anon}"
        self._anon += 1
        return self.param(name, value, trainable=False)

    def _resolve(self, ref) -> str:
        if isinstance(ref, str):
            if ref not in self._params:
                raise GraphError(f"unknown parameter {ref!r}")
            return ref
        return self._fixed(ref)

    # -- nodes ------------------------------------------------------------
    def _dim(self, i: int) -> int:
        if not 0 <= i < len(self._nodes):
            raise GraphError(f"unknown node id {i}")
        return self._nodes[i].dim

    def _add(self, op: str, inputs: Sequence[int], dim: int, **attrs) -> int:
        for i in inputs:
            self._dim(i)
        nid = len(self._nodes)
        self._nodes.append(Node(nid, op, tuple(int(i) for i in inputs), int(dim), attrs))
        return nid

    def input(self, dim: int) -> int:
        nid = self._add("input", (), dim)
        self._inputs.append(nid)
        return nid

    def constant(self, value) -> int:
        value = _frozen(np.atleast_1d(value))
        if value.ndim != 1:
            raise GraphError("constants must be vectors")
        return self._add("constant", (), value.size, value=value)

    def affine(self, x: int, W, b=None, gram_eps: float | None = None) -> int:
        wname = self._resolve(W)
        Wv = self._params[wname]
        if Wv.ndim != 2:
            raise GraphError("affine weight must be a matrix")
        if gram_eps is not None:
            if Wv.shape[0] != Wv.shape[1]:
                raise GraphError("Gram-form weight must be square")
            if gram_eps <= 0:
                raise GraphError("gram_eps must be positive")
        if Wv.shape[1] != self._dim(x):
            raise GraphError(f"affine weight {Wv.shape} does not match input dim {self._dim(x)}")
        bname = None
        if b is not None:
            bname = self._resolve(b)
            if self._params[bname].shape != (Wv.shape[0],):
                raise GraphError("affine bias shape mismatch")
        return self._add("affine", (x,), Wv.shape[0], W=wname, b=bname,
                         gram_eps=None if gram_eps is None else float(gram_eps))

    def leaky_relu(self, x: int, slope: float = LEAKY_SLOPE) -> int:
        return self._add("leaky_relu", (x,), self._dim(x), slope=float(slope))

    def relu(self, x: int) -> int:
        return self.leaky_relu(x, 0.0)

    def clamp(self, x: int, lo, hi) -> int:
        d = self._dim(x)
        lo = _frozen(np.broadcast_to(np.asarray(lo, float), (d,)))
        hi = _frozen(np.broadcast_to(np.asarray(hi, float), (d,)))
        if np.any(lo > hi):
            raise GraphError("clamp limits must satisfy lo <= hi")
        return self._add("clamp", (x,), d, lo=lo, hi=hi)

    def sin(self, x: int) -> int:
        return self._add("sin", (x,), self._dim(x))

    def cos(self, x: int) -> int:
        return self._add("cos", (x,), self._dim(x))

    def tan(self, x: int) -> int:
        return self._add("tan", (x,), self._dim(x))

    def abs(self, x: int) -> int:
        return self._add("abs", (x,), self._dim(x))

    def reciprocal(self, x: int) -> int:
        return self._add("reciprocal", (x,), self._dim(x))

    def scale(self, x: int, c: float) -> int:
        return self._add("scale", (x,), self._dim(x), c=float(c))

    def _binary(self, op, a, b) -> int:
        if self._dim(a) != self._dim(b):
            raise GraphError(f"{op}: dims {self._dim(a)} and {self._dim(b)} differ")
        return self._add(op, (a, b), self._dim(a))

    def add(self, a: int, b: int) -> int:
        return self._binary("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self._binary("sub", a, b)

    def mul(self, a: int, b: int) -> int:
        return self._binary("mul", a, b)

    def minimum(self, a: int, b: int) -> int:
        return self._binary("min", a, b)

    def maximum(self, a: int, b: int) -> int:
        return self._binary("max", a, b)

    def sum(self, x: int) -> int:
        return self._add("sum", (x,), 1)

    def l1norm(self, x: int) -> int:
        return self._add("l1norm", (x,), 1)

    def quadform(self, x: int, R, eps: float) -> int:
        rname = self._resolve(R)
        Rv = self._params[rname]
        if Rv.ndim != 2 or Rv.shape[1] != self._dim(x):
            raise GraphError("quadform factor does not match input dim")
        if eps <= 0:
            raise GraphError("quadform eps must be positive")
        return self._add("quadform", (x,), 1, R=rname, eps=float(eps))

    def concat(self, parts: Sequence[int]) -> int:
        if not parts:
            raise GraphError("concat needs at least one part")
        return self._add("concat", tuple(parts), sum(self._dim(p) for p in parts))

    def select(self, x: int, idx: Sequence[int]) -> int:
        idx = tuple(int(i) for i in idx)
        d = self._dim(x)
        if not idx or any(not 0 <= i < d for i in idx):
            raise GraphError(f"select indices {idx} out of range for dim {d}")
        return self._add("select", (x,), len(idx), idx=idx)

    def offset(self, x: int, c) -> int:
        """``x + c`` for a constant vector ``c``."""
        return self.add(x, self.constant(np.broadcast_to(np.asarray(c, float), (self._dim(x),))))

    # -- composition --------------------------------------------------------
    def call(self, graph: "Graph", inputs: Sequence[int], prefix: str = "") -> list[int]:
        """Inline ``graph`` with its inputs bound to ``inputs``.

        Parameters are renamed ``prefix + name``; inlining the same graph
        twice with the same prefix shares its parameters.
        """
        if len(inputs) != len(graph.inputs):
            raise GraphError(f"graph expects {len(graph.inputs)} inputs, got {len(inputs)}")
        for nid, i in zip(graph.inputs, inputs):
            if graph.nodes[nid].dim != self._dim(i):
                raise GraphError("inlined graph input dim mismatch")
        rename = {}
        for name, value in graph.params.items():
            new = prefix + name
            if name.startswith("_c") and name not in graph.trainable:
                new = self._fixed(value) if not prefix else self.param(new, value, trainable=False)
            else:
                self.param(new, value, trainable=name in graph.trainable)
            rename[name] = new
        mapping = dict(zip(graph.inputs, inputs))
        for node in graph.nodes:
            if node.op == "input":
                continue
            attrs = dict(node.attrs)
            for key in ("W", "b", "R"):
                if attrs.get(key) is not None:
                    attrs[key] = rename[attrs[key]]
            mapping[node.id] = self._add(node.op, [mapping[i] for i in node.inputs], node.dim, **attrs)
        return [mapping[o] for o in graph.outputs]

    def build(self, outputs) -> "Graph":
        if isinstance(outputs, Mapping):
            names, ids = tuple(outputs.keys()), tuple(outputs.values())
        else:
            ids = tuple(outputs)
            names = tuple(f"out{i}" for i in range(len(ids)))
        for i in ids:
            self._dim(i)
        if not self._inputs:
            raise GraphError("graph has no inputs")
        used = set()
        for n in self._nodes:
            for key in ("W", "b", "R"):
                if n.attrs.get(key) is not None:
                    used.add(n.attrs[key])
        params = {k: v for k, v in self._params.items() if k in used}
        trainable = frozenset(k for k in self._trainable if k in used)
        return Graph(tuple(self._nodes), tuple(self._inputs), ids, names, params, trainable)


class Trace:
    """Node values from one forward pass, kept for the backward pass."""

    __slots__ = ("values", "params", "squeeze")

    def __init__(self, values, params, squeeze):
        self.values = values
        self.params = params
        self.squeeze = squeeze


class Graph:
    """Immutable computation graph with a named parameter registry."""

    def __init__(self, nodes, inputs, outputs, output_names, params, trainable):
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self.inputs: tuple[int, ...] = tuple(inputs)
        self.outputs: tuple[int, ...] = tuple(outputs)
        self.output_names: tuple[str, ...] = tuple(output_names)
        self.params: dict[str, np.ndarray] = {k: _frozen(v) for k, v in params.items()}
        self.trainable: frozenset[str] = frozenset(trainable)
        for n in self.nodes:
            if any(i >= n.id for i in n.inputs):
                raise GraphError("nodes must be topologically ordered")
            if n.op not in ALL_OPS:
                raise GraphError(f"unknown op {n.op!r}")

    # -- metadata -----------------------------------------------------------
    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(self.nodes[i].dim for i in self.inputs)

    @property
    def output_dims(self) -> tuple[int, ...]:
        return tuple(self.nodes[i].dim for i in self.outputs)

    def output(self, name: str) -> int:
        try:
            return self.outputs[self.output_names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def trainable_params(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in sorted(self.trainable)}

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "Graph":
        params = dict(self.params)
        for k, v in updates.items():
            if k not in params:
                continue
            v = np.asarray(v, dtype=np.float64)
            if v.shape != params[k].shape:
                raise GraphError(f"parameter {k!r} shape {v.shape} != {params[k].shape}")
            params[k] = v
        return Graph(self.nodes, self.inputs, self.outputs, self.output_names, params, self.trainable)

    def _merged(self, params):
        if params is None:
            return self.params
        merged = dict(self.params)
        merged.update({k: v for k, v in params.items() if k in merged})
        return merged

    # -- evaluation -----------------------------------------------------------
    def trace(self, *xs, params=None) -> Trace:
        if len(xs) != len(self.inputs):
            raise GraphError(f"expected {len(self.inputs)} inputs, got {len(xs)}")
        xs = [np.asarray(x, dtype=np.float64) for x in xs]
        squeeze = xs[0].ndim == 1
        xs = [np.atleast_2d(x) for x in xs]
        batch = xs[0].shape[0]
        for nid, x in zip(self.inputs, xs):
            if x.shape != (batch, self.nodes[nid].dim):
                raise GraphError(f"input shape {x.shape} does not match dim {self.nodes[nid].dim}")
        P = self._merged(params)
        vals: list = [None] * len(self.nodes)
        for nid, x in zip(self.inputs, xs):
            vals[nid] = x
        for node in self.nodes:
            if node.op == "input":
                continue
            vals[node.id] = _eval(node, [vals[i] for i in node.inputs], P, batch)
        return Trace(vals, P, squeeze)

    def forward(self, *xs, params=None) -> list[np.ndarray]:
        tr = self.trace(*xs, params=params)
        return self.outputs_of(tr)

    def outputs_of(self, tr: Trace) -> list[np.ndarray]:
        outs = [tr.values[o] for o in self.outputs]
        if tr.squeeze:
            outs = [o[0] for o in outs]
        return outs

    def __call__(self, *xs, params=None):
        outs = self.forward(*xs, params=params)
        return outs[0] if len(outs) == 1 else outs

    def backward(self, tr: Trace, cotangents, wrt_params: bool = True, extra_params=()):
        """Reverse-mode pass.

        ``cotangents`` maps output index (or name) to an array shaped like that
        output; missing outputs get zero cotangent. Returns
        ``(input_grads, param_grads)`` where parameter gradients are summed
        over the batch and only reported for trainable parameters (plus any
        names in ``extra_params``).
        """
        if not isinstance(cotangents, Mapping):
            cotangents = dict(enumerate(cotangents))
        grads: list = [None] * len(self.nodes)
        for key, g in cotangents.items():
            if g is None:
                continue
            idx = self.output_names.index(key) if isinstance(key, str) else key
            nid = self.outputs[idx]
            g = np.asarray(g, dtype=np.float64)
            g = g.reshape(tr.values[nid].shape)
            grads[nid] = g if grads[nid] is None else grads[nid] + g
        pgrads: dict[str, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads[node.id]
            if g is None or node.op in ("input", "constant"):
                continue
            ins = [tr.values[i] for i in node.inputs]
            in_grads = _vjp(node, ins, tr.values[node.id], g, tr.params, pgrads if wrt_params else None)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        input_grads = []
        for nid in self.inputs:
            g = grads[nid]
            if g is None:
                g = np.zeros_like(tr.values[nid])
            input_grads.append(g[0] if tr.squeeze else g)
        pgrads = {k: v for k, v in pgrads.items() if k in self.trainable or k in extra_params}
        return input_grads, pgrads

    def kink_margin(self, tr: Trace) -> np.ndarray:
        """Per-sample distance of every kinked node input from its kink."""
        batch = tr.values[self.inputs[0]].shape[0]
        margin = np.full(batch, np.inf)
        for node in self.nodes:
            ins = [tr.values[i] for i in node.inputs]
            if node.op in ("leaky_relu", "abs", "l1norm"):
                m = np.abs(ins[0])
            elif node.op == "clamp":
                z = ins[0]
                m = np.minimum(np.abs(z - node.attrs["lo"]), np.abs(z - node.attrs["hi"]))
            elif node.op in ("min", "max"):
                m = np.abs(ins[0] - ins[1])
            else:
                continue
            m = np.where(np.isfinite(m), m, np.inf)
            margin = np.minimum(margin, m.min(axis=1))
        return margin

    # -- serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": GRAPH_FORMAT_VERSION,
            "nodes": [
                {"id": n.id, "op": n.op, "inputs": list(n.inputs), "dim": n.dim,
                 "attrs": {k: _encode_attr(v) for k, v in sorted(n.attrs.items())}}
                for n in self.nodes
            ],
            "params": {k: {"shape": list(v.shape), "data": _encode_floats(v.ravel()),
                           "trainable": k in self.trainable}
                       for k, v in sorted(self.params.items())},
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "output_names": list(self.output_names),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Graph":
        if d.get("version") != GRAPH_FORMAT_VERSION:
            raise GraphError(f"unsupported graph format version {d.get('version')!r}")
        nodes = []
        for nd in d["nodes"]:
            attrs = {k: _decode_attr(k, v) for k, v in nd["attrs"].items()}
            nodes.append(Node(nd["id"], nd["op"], tuple(nd["inputs"]), nd["dim"], attrs))
        params, trainable = {}, set()
        for k, p in d["params"].items():
            params[k] = np.array(_decode_floats(p["data"]), dtype=np.float64).reshape(p["shape"])
            if p["trainable"]:
                trainable.add(k)
        return cls(nodes, d["inputs"], d["outputs"], d["output_names"], params, trainable)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "Graph":
        return cls.from_dict(json.loads(s))


def _encode_floats(values: Iterable[float]) -> list:
    out = []
    for v in values:
        v = float(v)
        out.append(v if np.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan"))
    return out


def _decode_floats(values) -> list[float]:
    return [float(v) for v in values]


def _encode_attr(v):
    if isinstance(v, np.ndarray):
        return {"array": _encode_floats(v.ravel()), "shape": list(v.shape)}
    if isinstance(v, tuple):
        return list(v)
    return v


def _decode_attr(key, v):
    if isinstance(v, dict) and "array" in v:
        return _frozen(np.array(_decode_floats(v["array"])).reshape(v["shape"]))
    if key == "idx":
        return tuple(v)
    return v


# ---------------------------------------------------------------------------
# primitive evaluation and vector-Jacobian products


def _eval(node: Node, ins, P, batch):
    op = node.op
    a = node.attrs
    if op == "constant":
        return np.broadcast_to(a["value"], (batch, node.dim)).copy()
    x = ins[0]
    if op == "affine":
        y = x @ effective_weight(node, P).T
        if a["b"] is not None:
            y = y + P[a["b"]]
        return y
    if op == "leaky_relu":
        if a["slope"] == 0:
            return np.maximum(x, 0.0)  # keeps -inf -> 0 free of inf * 0
        return np.where(x >= 0, x, a["slope"] * x)
    if op == "clamp":
        return np.minimum(np.maximum(x, a["lo"]), a["hi"])
    if op == "sin":
        return np.sin(x)
    if op == "cos":
        return np.cos(x)
    if op == "tan":
        return np.tan(x)
    if op == "abs":
        return np.abs(x)
    if op == "reciprocal":
        return 1.0 / x
    if op == "scale":
        return a["c"] * x
    if op == "add":
        return x + ins[1]
    if op == "sub":
        return x - ins[1]
    if op == "mul":
        return x * ins[1]
    if op == "min":
        return np.minimum(x, ins[1])
    if op == "max":
        return np.maximum(x, ins[1])
    if op == "sum":
        return x.sum(axis=1, keepdims=True)
    if op == "l1norm":
        return np.abs(x).sum(axis=1, keepdims=True)
    if op == "quadform":
        M = quadform_matrix(node, P)
        return np.einsum("bi,ij,bj->b", x, M, x)[:, None]
    if op == "concat":
        return np.concatenate(ins, axis=1)
    if op == "select":
        return x[:, list(a["idx"])]
    raise GraphError(f"unknown op {op!r}")


def _acc(pgrads, name, g):
    if pgrads is None:
        return
    pgrads[name] = g if name not in pgrads else pgrads[name] + g


def _vjp(node: Node, ins, out, g, P, pgrads):
    op = node.op
    a = node.attrs
    x = ins[0]
    if op == "affine":
        W = effective_weight(node, P)
        if pgrads is not None:
            G = g.T @ x
            if a["gram_eps"] is not None:
                R = P[a["W"]]
                _acc(pgrads, a["W"], R @ (G + G.T))
            else:
                _acc(pgrads, a["W"], G)
            if a["b"] is not None:
                _acc(pgrads, a["b"], g.sum(axis=0))
        return [g @ W]
    if op == "leaky_relu":
        return [g * np.where(x >= 0, 1.0, a["slope"])]
    if op == "clamp":
        return [g * ((x >= a["lo"]) & (x < a["hi"]))]
    if op == "sin":
        return [g * np.cos(x)]
    if op == "cos":
        return [-g * np.sin(x)]
    if op == "tan":
        return [g * (1.0 + out * out)]
    if op == "abs":
        return [g * np.where(x >= 0, 1.0, -1.0)]
    if op == "reciprocal":
        return [-g * out * out]
    if op == "scale":
        return [g * a["c"]]
    if op == "add":
        return [g, g]
    if op == "sub":
        return [g, -g]
    if op == "mul":
        return [g * ins[1], g * x]
    if op in ("min", "max"):
        first = (x <= ins[1]) if op == "min" else (x >= ins[1])
        return [g * first, g * ~first]
    if op == "sum":
        return [np.broadcast_to(g, x.shape)]
    if op == "l1norm":
        return [g * np.where(x >= 0, 1.0, -1.0)]
    if op == "quadform":
        M = quadform_matrix(node, P)
        if pgrads is not None:
            G = np.einsum("b,bi,bj->ij", g[:, 0], x, x)
            R = P[a["R"]]
            _acc(pgrads, a["R"], R @ (G + G.T))
        return [g * (x @ (M + M.T))]
    if op == "concat":
        parts, start = [], 0
        for xi in ins:
            parts.append(g[:, start:start + xi.shape[1]])
            start += xi.shape[1]
        return parts
    if op == "select":
        gx = np.zeros_like(x)
        np.add.at(gx, (slice(None), list(a["idx"])), g)
        return [gx]
    raise GraphError(f"no backward rule for {op!r}")


def forward(graph: Graph, *xs, params=None):
    """Evaluate ``graph``; single-output graphs return a bare array."""
    return graph(*xs, params=params)


def backward(graph: Graph, *xs, cotangent, params=None):
    """Reverse-mode derivatives of ``<cotangent, graph(x)>``.

    ``cotangent`` is an array for a single-output graph or a sequence with one
    entry per output.
    """
    tr = graph.trace(*xs, params=params)
    if len(graph.outputs) == 1 and not isinstance(cotangent, (list, tuple, Mapping)):
        cotangent = [cotangent]
    return graph.backward(tr, cotangent)
