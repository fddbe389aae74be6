"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Tape is an append-only list of nodes; node handles are plain integers and
inputs always reference earlier nodes, so reverse iteration is a topological
order. Values are immutable during a forward/backward pass (leaves copy their
input). There is no broadcasting beyond bias_add: explicit shapes keep the
engine small and auditable. Noise is an explicit operand, never hidden RNG.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, ShapeError


def as_tensor(value) -> np.ndarray:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim > 0 and not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)
    if not np.all(np.isfinite(a)):
        raise InvalidInput("tensors must be finite")
    return a


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    ctx: tuple = ()


class Tape:
    """Records forward ops; backward() accumulates reverse-mode gradients."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def _push(self, op: str, inputs: tuple[int, ...], value: np.ndarray, ctx: tuple = ()) -> int:
        self.nodes.append(_Node(op, inputs, value, ctx))
        return len(self.nodes) - 1

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    def leaf(self, value) -> int:
        """A constant or parameter leaf; the array is copied in."""
        return self._push("leaf", (), as_tensor(value).copy())

    # -- elementwise and linear ops -------------------------------------

    def _same_shape(self, op: str, a: int, b: int) -> tuple[np.ndarray, np.ndarray]:
        va, vb = self.value(a), self.value(b)
        if va.shape != vb.shape:
            raise ShapeError(f"{op} shapes differ: {va.shape} vs {vb.shape}")
        return va, vb

    def add(self, a: int, b: int) -> int:
        va, vb = self._same_shape("add", a, b)
        return self._push("add", (a, b), va + vb)

    def sub(self, a: int, b: int) -> int:
        va, vb = self._same_shape("sub", a, b)
        return self._push("sub", (a, b), va - vb)

    def mul(self, a: int, b: int) -> int:
        va, vb = self._same_shape("mul", a, b)
        return self._push("mul", (a, b), va * vb)

    def scale(self, a: int, c: float) -> int:
        return self._push("scale", (a,), self.value(a) * float(c), (float(c),))

    def matmul(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
            raise ShapeError(f"matmul shapes incompatible: {va.shape} vs {vb.shape}")
        return self._push("matmul", (a, b), va @ vb)

    def bias_add(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        if va.ndim != 2 or vb.ndim != 1 or va.shape[1] != vb.shape[0]:
            raise ShapeError(f"bias_add shapes incompatible: {va.shape} vs {vb.shape}")
        return self._push("bias_add", (a, b), va + vb[None, :])

    def tanh(self, a: int) -> int:
        return self._push("tanh", (a,), np.tanh(self.value(a)))

    def relu(self, a: int) -> int:
        v = self.value(a)
        return self._push("relu", (a,), np.maximum(v, 0.0))

    def exp(self, a: int) -> int:
        return self._push("exp", (a,), np.exp(self.value(a)))

    def exp_half(self, a: int) -> int:
        """e^{0.5 x}, the standard-deviation map for log-variances."""
        return self._push("exp_half", (a,), np.exp(0.5 * self.value(a)))

    def square(self, a: int) -> int:
        v = self.value(a)
        return self._push("square", (a,), v * v)

    def clamp(self, a: int, lo: float, hi: float) -> int:
        v = self.value(a)
        out = np.clip(v, lo, hi)
        mask = (v >= lo) & (v <= hi)
        return self._push("clamp", (a,), out, (mask,))

    # -- shape ops -------------------------------------------------------

    def concat(self, a: int, b: int) -> int:
        """Column-wise concat of two N x * matrices into N x (a+b)."""
        va, vb = self.value(a), self.value(b)
        if va.ndim != 2 or vb.ndim != 2 or va.shape[0] != vb.shape[0]:
            raise ShapeError(f"concat shapes incompatible: {va.shape} vs {vb.shape}")
        return self._push("concat", (a, b), np.concatenate([va, vb], axis=1), (va.shape[1],))

    def slice_cols(self, a: int, start: int, stop: int) -> int:
        v = self.value(a)
        if v.ndim != 2 or not (0 <= start < stop <= v.shape[1]):
            raise ShapeError(f"slice [{start}:{stop}] invalid for shape {v.shape}")
        return self._push("slice", (a,), v[:, start:stop].copy(), (start, stop))

    # -- reductions -------------------------------------------------------

    def sum(self, a: int, axis: int | None = None) -> int:
        v = self.value(a)
        self._check_axis(v, axis)
        return self._push("sum", (a,), np.asarray(v.sum(axis=axis)), (axis, v.shape))

    def mean(self, a: int, axis: int | None = None) -> int:
        v = self.value(a)
        self._check_axis(v, axis)
        return self._push("mean", (a,), np.asarray(v.mean(axis=axis)), (axis, v.shape))

    @staticmethod
    def _check_axis(v: np.ndarray, axis: int | None) -> None:
        if axis is not None and (v.ndim != 2 or axis not in (0, 1)):
            raise ShapeError(f"axis reductions need 2-D input, got {v.shape} axis={axis}")

    # -- softmax-family ops ------------------------------------------------

    def log_softmax_rows(self, a: int) -> int:
        v = self.value(a)
        if v.ndim != 2 or v.shape[1] < 2:
            raise ShapeError(f"log_softmax_rows expects N x K with K >= 2, got {v.shape}")
        shifted = v - v.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return self._push("log_softmax_rows", (a,), out)

    def logsumexp_cols(self, a: int) -> int:
        """logsumexp over rows (axis 0) of an N x K matrix, yielding K values."""
        v = self.value(a)
        if v.ndim != 2:
            raise ShapeError(f"logsumexp_cols expects 2-D input, got {v.shape}")
        m = v.max(axis=0, keepdims=True)
        out = np.log(np.exp(v - m).sum(axis=0)) + m[0]
        return self._push("logsumexp_cols", (a,), out)

    def gaussian_reparam(self, mu: int, logvar: int, noise) -> int:
        """z = mu + eps * exp(0.5 logvar) with eps a constant operand."""
        eps = self.leaf(noise)
        if self.value(eps).shape != self.value(mu).shape:
            raise ShapeError(
                f"noise shape {self.value(eps).shape} != mu shape {self.value(mu).shape}"
            )
        return self.add(mu, self.mul(eps, self.exp_half(logvar)))

    # -- reverse pass -------------------------------------------------------

    def backward(self, loss: int) -> list[np.ndarray | None]:
        """Gradients of a scalar loss node w.r.t. every node on the tape.

        Accumulation runs in reverse node order, so results are deterministic.
        Entries are None for nodes the loss does not depend on.
        """
        if self.value(loss).size != 1:
            raise InvalidInput(f"loss must be scalar, got shape {self.value(loss).shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss] = np.ones_like(self.value(loss))
        for i in range(loss, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            for j, contrib in zip(node.inputs, self._vjp(node, g)):
                if grads[j] is None:
                    grads[j] = contrib.copy()
                else:
                    grads[j] += contrib
        return grads

    def _vjp(self, node: _Node, g: np.ndarray):
        op = node.op
        if op == "leaf":
            return ()
        if op == "add":
            return (g, g)
        if op == "sub":
            return (g, -g)
        if op == "mul":
            a, b = node.inputs
            return (g * self.value(b), g * self.value(a))
        if op == "scale":
            return (g * node.ctx[0],)
        if op == "matmul":
            a, b = node.inputs
            return (g @ self.value(b).T, self.value(a).T @ g)
        if op == "bias_add":
            return (g, g.sum(axis=0))
        if op == "tanh":
            return (g * (1.0 - node.value * node.value),)
        if op == "relu":
            return (g * (self.value(node.inputs[0]) > 0.0),)
        if op == "exp":
            return (g * node.value,)
        if op == "exp_half":
            return (g * 0.5 * node.value,)
        if op == "square":
            return (g * 2.0 * self.value(node.inputs[0]),)
        if op == "clamp":
            return (g * node.ctx[0],)
        if op == "concat":
            split = node.ctx[0]
            return (g[:, :split], g[:, split:])
        if op == "slice":
            start, stop = node.ctx
            full = np.zeros_like(self.value(node.inputs[0]))
            full[:, start:stop] = g
            return (full,)
        if op == "sum":
            axis, shape = node.ctx
            return (self._spread(g, axis, shape),)
        if op == "mean":
            axis, shape = node.ctx
            n = np.prod(shape) if axis is None else shape[axis]
            return (self._spread(g, axis, shape) / n,)
        if op == "log_softmax_rows":
            soft = np.exp(node.value)
            return (g - soft * g.sum(axis=1, keepdims=True),)
        if op == "logsumexp_cols":
            soft = np.exp(self.value(node.inputs[0]) - node.value[None, :])
            return (soft * g[None, :],)
        raise InvalidInput(f"unknown op {op!r}")

    @staticmethod
    def _spread(g: np.ndarray, axis: int | None, shape: tuple) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        if axis == 0:
            return np.broadcast_to(g[None, :], shape).copy()
        return np.broadcast_to(g[:, None], shape).copy()


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def init_adam_state(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        t=0,
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    hyper: AdamHyper,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh arrays, inputs untouched."""
    t = state.t + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name!r}")
        m = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * (g * g)
        update = hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        new_params[name] = p - update
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


# -- finite differences --------------------------------------------------------


def numerical_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = f(x)
        xf[i] = orig - h
        fm = f(x)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return g


def gradient_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(1, |a_i|, |n_i|) over all entries."""
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
