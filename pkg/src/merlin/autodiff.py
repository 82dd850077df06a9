"""Reverse-mode differentiation over a small, fixed set of dense 2-D primitives.

A :class:`Graph` is built once (declaring input/parameter shapes), then fed
values with :meth:`Graph.forward` and differentiated with :meth:`Graph.backward`.
All tensors are 2-D float64 arrays; scalars are ``(1, 1)``.

This engine is the reference path. Training loops run fused kernels from
:mod:`merlin.kernels`, which are tested against graphs built here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASK_VALUE = -1e10


class ShapeError(ValueError):
    """Shape mismatch, raised with the name of the offending node."""


class GraphUsageError(RuntimeError):
    pass


def as_tensor(a) -> np.ndarray:
    """Coerce to a 2-D float64 array (vectors become single rows)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got {arr.ndim} dims")
    return arr


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, int]
    name: str
    attrs: dict = field(default_factory=dict)


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self._by_name: dict[str, int] = {}
        self.values: list[np.ndarray] | None = None
        self.adjoints: list[np.ndarray] | None = None
        self._feed_aux: dict = {}

    # -- construction -------------------------------------------------------

    def _add(self, op, inputs, shape, name=None, **attrs) -> int:
        idx = len(self.nodes)
        name = name or f"{op}_{idx}"
        if name in self._by_name:
            raise ValueError(f"duplicate node name {name!r}")
        self.nodes.append(Node(op, tuple(inputs), tuple(shape), name, attrs))
        self._by_name[name] = idx
        self.values = self.adjoints = None
        return idx

    def _shape(self, i: int) -> tuple[int, int]:
        return self.nodes[i].shape

    def input(self, name: str, shape) -> int:
        return self._add("input", (), shape, name)

    def param(self, name: str, shape) -> int:
        return self._add("param", (), shape, name)

    def matmul(self, a, b, name=None):
        (n, k), (k2, m) = self._shape(a), self._shape(b)
        if k != k2:
            raise ShapeError(f"{name or 'matmul'}: inner dims {k} != {k2}")
        return self._add("matmul", (a, b), (n, m), name)

    def bias_add(self, a, b, name=None):
        (n, m), bs = self._shape(a), self._shape(b)
        if bs != (1, m):
            raise ShapeError(f"{name or 'bias_add'}: bias shape {bs} != (1, {m})")
        return self._add("bias_add", (a, b), (n, m), name)

    def add(self, a, b, name=None):
        if self._shape(a) != self._shape(b):
            raise ShapeError(f"{name or 'add'}: {self._shape(a)} vs {self._shape(b)}")
        return self._add("add", (a, b), self._shape(a), name)

    def concat(self, a, b, name=None):
        (n, p), (n2, q) = self._shape(a), self._shape(b)
        if n != n2:
            raise ShapeError(f"{name or 'concat'}: row counts {n} != {n2}")
        return self._add("concat", (a, b), (n, p + q), name)

    def relu(self, a, name=None):
        return self._add("relu", (a,), self._shape(a), name)

    def exp(self, a, name=None):
        return self._add("exp", (a,), self._shape(a), name)

    def log(self, a, name=None):
        return self._add("log", (a,), self._shape(a), name)

    def softmax_xent(self, logits, labels: str, seen: str | None = None, name=None):
        """Mean masked cross-entropy; ``labels``/``seen`` name integer/bool feeds."""
        return self._add("softmax_xent", (logits,), (1, 1), name, labels=labels, seen=seen)

    def reparam(self, mean, log_var, noise, name=None):
        s = self._shape(mean)
        if self._shape(log_var) != s or self._shape(noise) != s:
            raise ShapeError(f"{name or 'reparam'}: mean/log_var/noise shapes differ")
        return self._add("reparam", (mean, log_var, noise), s, name)

    def kl_diag(self, mq, lq, mp, lp, name=None):
        s = self._shape(mq)
        for other in (lq, mp, lp):
            if self._shape(other) != s:
                raise ShapeError(f"{name or 'kl_diag'}: operand shapes differ")
        return self._add("kl_diag", (mq, lq, mp, lp), (1, 1), name)

    def mse(self, a, b, name=None):
        """Half sum of squared differences (unit-variance Gaussian NLL, constants dropped)."""
        if self._shape(a) != self._shape(b):
            raise ShapeError(f"{name or 'mse'}: {self._shape(a)} vs {self._shape(b)}")
        return self._add("mse", (a, b), (1, 1), name)

    # -- evaluation ---------------------------------------------------------

    def index(self, name: str) -> int:
        return self._by_name[name]

    def leaves(self, kind: str = "param") -> list[str]:
        return [n.name for n in self.nodes if n.op == kind]

    def forward(self, feed: dict, output: int | str | None = None) -> np.ndarray:
        vals: list[np.ndarray] = []
        self._feed_aux = feed
        for node in self.nodes:
            if node.op in ("input", "param"):
                if node.name not in feed:
                    raise ShapeError(f"{node.name}: no value fed")
                v = as_tensor(feed[node.name])
                if v.shape != node.shape:
                    raise ShapeError(f"{node.name}: fed shape {v.shape}, declared {node.shape}")
            else:
                v = self._eval(node, [vals[i] for i in node.inputs])
                if not np.all(np.isfinite(v)):
                    raise FloatingPointError(f"{node.name}: non-finite value in forward pass")
            vals.append(v)
        self.values = vals
        self.adjoints = None
        out = len(vals) - 1 if output is None else output
        if isinstance(out, str):
            out = self._by_name[out]
        self._output = out
        return vals[out]

    def _masked_logits(self, node, x):
        seen = node.attrs["seen"]
        if seen is None:
            return x
        mask = np.asarray(self._feed_aux[seen], dtype=bool)
        return np.where(mask[None, :], x, MASK_VALUE)

    def _eval(self, node: Node, xs: list[np.ndarray]) -> np.ndarray:
        op = node.op
        if op == "matmul":
            return xs[0] @ xs[1]
        if op in ("bias_add", "add"):
            return xs[0] + xs[1]
        if op == "concat":
            return np.concatenate(xs, axis=1)
        if op == "relu":
            return np.maximum(xs[0], 0.0)
        if op == "exp":
            return np.exp(xs[0])
        if op == "log":
            return np.log(xs[0])
        if op == "softmax_xent":
            y = np.asarray(self._feed_aux[node.attrs["labels"]], dtype=np.int64)
            z = self._masked_logits(node, xs[0])
            z = z - z.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            return np.array([[-logp[np.arange(len(y)), y].mean()]])
        if op == "reparam":
            m, lv, eps = xs
            return m + np.exp(0.5 * lv) * eps
        if op == "kl_diag":
            mq, lq, mp, lp = xs
            kl = 0.5 * (lp - lq) + (np.exp(lq) + (mq - mp) ** 2) / (2.0 * np.exp(lp)) - 0.5
            return np.array([[kl.sum()]])
        if op == "mse":
            d = xs[0] - xs[1]
            return np.array([[0.5 * np.sum(d * d)]])
        raise GraphUsageError(f"unknown op {op}")

    def backward(self) -> dict[str, np.ndarray]:
        """Adjoints of the last forward output w.r.t. every input and parameter."""
        if self.values is None:
            raise GraphUsageError("backward() called before forward()")
        vals = self.values
        adj = [None] * len(self.nodes)
        out = self._output
        adj[out] = np.ones_like(vals[out])
        for i in range(out, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or not node.inputs:
                continue
            for j, gj in zip(node.inputs, self._vjp(node, vals[i], [vals[k] for k in node.inputs], g)):
                if gj is None:
                    continue
                adj[j] = gj if adj[j] is None else adj[j] + gj
        for i, node in enumerate(self.nodes):
            if adj[i] is None:
                adj[i] = np.zeros(node.shape)
        self.adjoints = adj
        return {n.name: adj[i] for i, n in enumerate(self.nodes) if n.op in ("input", "param")}

    def _vjp(self, node: Node, out, xs, g):
        op = node.op
        if op == "matmul":
            return g @ xs[1].T, xs[0].T @ g
        if op == "bias_add":
            return g, g.sum(axis=0, keepdims=True)
        if op == "add":
            return g, g
        if op == "concat":
            p = xs[0].shape[1]
            return g[:, :p], g[:, p:]
        if op == "relu":
            return (g * (xs[0] > 0),)
        if op == "exp":
            return (g * out,)
        if op == "log":
            return (g / xs[0],)
        if op == "softmax_xent":
            y = np.asarray(self._feed_aux[node.attrs["labels"]], dtype=np.int64)
            z = self._masked_logits(node, xs[0])
            z = z - z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(y)), y] -= 1.0
            return (g[0, 0] * p / len(y),)
        if op == "reparam":
            m, lv, eps = xs
            sd = np.exp(0.5 * lv)
            return g, g * 0.5 * sd * eps, g * sd
        if op == "kl_diag":
            mq, lq, mp, lp = xs
            s = g[0, 0]
            inv_vp = np.exp(-lp)
            diff = mq - mp
            d_mq = s * diff * inv_vp
            d_lq = s * (0.5 * np.exp(lq) * inv_vp - 0.5)
            d_lp = s * (0.5 - 0.5 * (np.exp(lq) + diff * diff) * inv_vp)
            return d_mq, d_lq, -d_mq, d_lp
        if op == "mse":
            d = g[0, 0] * (xs[0] - xs[1])
            return d, -d
        raise GraphUsageError(f"unknown op {op}")


def _relu_pattern(graph: Graph) -> list[np.ndarray]:
    return [graph.values[i] > 0 for i, n in enumerate(graph.nodes) if n.op == "relu"] + [
        graph.values[n.inputs[0]] > 0 for n in graph.nodes if n.op == "relu"
    ]


def grad_check(graph: Graph, feed: dict, eps: float = 1e-5, wrt=None, floor: float = 1e-6,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates whose +/-eps perturbation flips any ReLU (a kink) are skipped.
    ``floor`` bounds the denominator so exactly-zero gradients compare on an
    absolute scale. ``max_entries`` subsamples coordinates per tensor.
    """
    wrt = wrt if wrt is not None else graph.leaves("param")
    feed = {k: (as_tensor(v).copy() if k in wrt else v) for k, v in feed.items()}
    graph.forward(feed)
    base_pattern = _relu_pattern(graph)
    analytic = graph.backward()
    worst = 0.0
    for name in wrt:
        x = feed[name]
        coords = list(np.ndindex(*x.shape))
        if max_entries is not None and len(coords) > max_entries:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(coords), max_entries, replace=False)
            coords = [coords[i] for i in pick]
        for c in coords:
            orig = x[c]
            x[c] = orig + eps
            fp = graph.forward(feed)[0, 0]
            kink = any((a != b).any() for a, b in zip(_relu_pattern(graph), base_pattern))
            x[c] = orig - eps
            fm = graph.forward(feed)[0, 0]
            kink = kink or any((a != b).any() for a, b in zip(_relu_pattern(graph), base_pattern))
            x[c] = orig
            if kink:
                continue
            num = (fp - fm) / (2 * eps)
            a = analytic[name][c]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    graph.forward(feed)
    return worst
