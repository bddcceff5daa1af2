"""Define-then-run tensor graph with reverse-mode differentiation and Adam.

A :class:`Graph` is built once from named inputs, parameters and constants,
then evaluated many times. Node shapes are *core* shapes: at run time every
input may carry one extra leading batch axis, which flows through all
operators untouched (parameters and constants broadcast against it).

    g = Graph()
    x = g.input("x", (3,))
    w = g.param("w", np.ones((3, 2)))
    y = g.matmul(x, w)
    loss = g.mean(g.abs(y))
    g.forward({"x": np.arange(3.0)})
    grads = g.backward(loss)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
DTYPE = np.float64


class GraphError(ValueError):
    """Raised for malformed graphs: shape mismatches, unknown operators."""


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None


def _broadcast_shape(a, b, where):
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise GraphError(f"{where}: shapes {a} and {b} do not broadcast") from None


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def sigmoid(x):
    # tanh form: no overflow for large |x| and cheaper than exp + divide
    s = np.multiply(x, 0.5)
    np.tanh(s, out=s)
    s *= 0.5
    s += 0.5
    return s


class Graph:
    """Static computation graph; node ids are positions in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self._param_nodes: dict[str, int] = {}
        self._input_nodes: dict[str, int] = {}
        self._values: list | None = None

    # ------------------------------------------------------------------ build
    def _add(self, op, inputs=(), shape=(), name=None, **attrs):
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: input node {i} does not exist")
        if any(int(d) < 1 for d in shape):
            raise GraphError(f"{op}: dimensions must be >= 1, got {shape}")
        self.nodes.append(Node(op, tuple(inputs), tuple(int(d) for d in shape), attrs, name))
        return len(self.nodes) - 1

    def _where(self, op, name):
        return f"node #{len(self.nodes)} ({name or op})"

    def shape(self, node):
        return self.nodes[node].shape

    def input(self, name, shape):
        if name in self._input_nodes:
            raise GraphError(f"input {name!r} declared twice")
        nid = self._add("input", (), shape, name=name)
        self._input_nodes[name] = nid
        return nid

    def param(self, name, value):
        if name in self._param_nodes:
            raise GraphError(f"parameter {name!r} declared twice")
        value = np.array(value, dtype=DTYPE)
        nid = self._add("param", (), value.shape, name=name)
        self.params[name] = value
        self._param_nodes[name] = nid
        return nid

    def const(self, value, name=None):
        value = np.asarray(value, dtype=DTYPE)
        return self._add("const", (), value.shape, name=name, value=value)

    def add(self, a, b, name=None):
        shape = _broadcast_shape(self.shape(a), self.shape(b), self._where("add", name))
        return self._add("add", (a, b), shape, name=name)

    def sub(self, a, b, name=None):
        shape = _broadcast_shape(self.shape(a), self.shape(b), self._where("sub", name))
        return self._add("sub", (a, b), shape, name=name)

    def mul(self, a, b, name=None):
        shape = _broadcast_shape(self.shape(a), self.shape(b), self._where("mul", name))
        return self._add("mul", (a, b), shape, name=name)

    def matmul(self, a, b, name=None):
        sa, sb = self.shape(a), self.shape(b)
        where = self._where("matmul", name)
        if len(sa) < 2 or len(sb) < 2:
            raise GraphError(f"{where}: matmul needs operands of rank >= 2, got {sa} and {sb}")
        if sa[-1] != sb[-2]:
            raise GraphError(f"{where}: inner dimensions differ, {sa} @ {sb}")
        stack = _broadcast_shape(sa[:-2], sb[:-2], where)
        return self._add("matmul", (a, b), stack + (sa[-2], sb[-1]), name=name)

    def conv1d(self, x, kernel, name=None):
        """Valid 1D convolution along axis -2: (..., len, Cin) * (Kt, Cin, Cout)."""
        sx, sk = self.shape(x), self.shape(kernel)
        where = self._where("conv1d", name)
        if len(sk) != 3 or len(sx) < 2:
            raise GraphError(f"{where}: expected x (..., len, Cin) and kernel (Kt, Cin, Cout), got {sx}, {sk}")
        kt, cin, cout = sk
        if sx[-1] != cin:
            raise GraphError(f"{where}: input has {sx[-1]} channels, kernel expects {cin}")
        if sx[-2] < kt:
            raise GraphError(f"{where}: temporal length {sx[-2]} shorter than kernel {kt}")
        return self._add("conv1d", (x, kernel), sx[:-2] + (sx[-2] - kt + 1, cout), name=name)

    def elu(self, x, name=None):
        return self._add("elu", (x,), self.shape(x), name=name)

    def sigmoid(self, x, name=None):
        return self._add("sigmoid", (x,), self.shape(x), name=name)

    def abs(self, x, name=None):
        return self._add("abs", (x,), self.shape(x), name=name)

    def concat(self, xs, axis=-1, name=None):
        xs = tuple(xs)
        where = self._where("concat", name)
        shapes = [self.shape(x) for x in xs]
        rank = len(shapes[0])
        ax = axis % rank
        for s in shapes[1:]:
            if len(s) != rank or s[:ax] + s[ax + 1:] != shapes[0][:ax] + shapes[0][ax + 1:]:
                raise GraphError(f"{where}: cannot concatenate shapes {shapes} on axis {axis}")
        out = list(shapes[0])
        out[ax] = sum(s[ax] for s in shapes)
        return self._add("concat", xs, out, name=name, axis=ax - rank)

    def slice(self, x, axis, start, stop, name=None):
        s = self.shape(x)
        ax = axis % len(s)
        if not 0 <= start < stop <= s[ax]:
            raise GraphError(f"{self._where('slice', name)}: [{start}:{stop}] out of range for axis of size {s[ax]}")
        out = list(s)
        out[ax] = stop - start
        return self._add("slice", (x,), out, name=name, axis=ax - len(s), start=start, stop=stop)

    def reshape(self, x, shape, name=None):
        shape = tuple(shape)
        if int(np.prod(shape)) != int(np.prod(self.shape(x))):
            raise GraphError(f"{self._where('reshape', name)}: cannot reshape {self.shape(x)} to {shape}")
        return self._add("reshape", (x,), shape, name=name)

    def mean(self, x, name=None):
        return self._add("mean", (x,), (), name=name)

    def sum(self, x, name=None):
        return self._add("sum", (x,), (), name=name)

    # ---------------------------------------------------------------- forward
    def sinks(self):
        used = {i for node in self.nodes for i in node.inputs}
        return [i for i in range(len(self.nodes)) if i not in used]

    def forward(self, inputs: dict, params: dict | None = None, until: int | None = None) -> dict:
        """Evaluate nodes in order; return ``{name or id: value}`` for sink nodes.

        ``params`` optionally overrides stored parameter values (read-only).
        With ``until``, only the prefix ``0..until`` is evaluated and that
        node's value is returned.
        """
        last = len(self.nodes) - 1 if until is None else until
        missing = {k for k, nid in self._input_nodes.items() if nid <= last} - set(inputs)
        if missing:
            raise GraphError(f"unbound inputs: {sorted(missing)}")
        params = self.params if params is None else {**self.params, **params}
        vals = [None] * len(self.nodes)
        for i in range(last + 1):
            vals[i] = self._eval(i, self.nodes[i], vals, inputs, params)
        self._values = vals
        if until is not None:
            return {(self.nodes[until].name or until): vals[until]}
        return {(self.nodes[i].name or i): vals[i] for i in self.sinks()}

    def value(self, node):
        if self._values is None:
            raise GraphError("forward has not been evaluated")
        return self._values[node]

    def _eval(self, i, node, vals, inputs, params):
        op = node.op
        a = [vals[j] for j in node.inputs]
        if op == "input":
            v = np.asarray(inputs[node.name], dtype=DTYPE)
            if v.shape[v.ndim - len(node.shape):] != node.shape or v.ndim - len(node.shape) > 1:
                raise GraphError(f"node #{i} ({node.name}): expected shape {node.shape} "
                                 f"(optionally batched), got {v.shape}")
            return v
        if op == "param":
            v = params[node.name]
            if v.shape != node.shape:
                raise GraphError(f"node #{i} ({node.name}): parameter shape {v.shape} != {node.shape}")
            return v
        if op == "const":
            return node.attrs["value"]
        if op == "add":
            return a[0] + a[1]
        if op == "sub":
            return a[0] - a[1]
        if op == "mul":
            return a[0] * a[1]
        if op == "matmul":
            if a[1].ndim == 2:
                return _mm(a[0], a[1])
            return np.matmul(a[0], a[1])
        if op == "conv1d":
            return _mm(_im2col(a[0], a[1].shape[0]), a[1].reshape(-1, a[1].shape[-1]))
        if op == "elu":
            return elu(a[0])
        if op == "sigmoid":
            return sigmoid(a[0])
        if op == "abs":
            return np.abs(a[0])
        if op == "concat":
            return np.concatenate(a, axis=node.attrs["axis"])
        if op == "slice":
            idx = [slice(None)] * a[0].ndim
            idx[node.attrs["axis"]] = slice(node.attrs["start"], node.attrs["stop"])
            return a[0][tuple(idx)]
        if op == "reshape":
            src = self.nodes[node.inputs[0]].shape
            batch = a[0].shape[:a[0].ndim - len(src)]
            return a[0].reshape(batch + node.shape)
        if op == "mean":
            return np.asarray(a[0].mean())
        if op == "sum":
            return np.asarray(a[0].sum())
        raise GraphError(f"node #{i}: unknown operator {op!r}")

    # --------------------------------------------------------------- backward
    def backward(self, loss) -> dict[str, np.ndarray]:
        """Gradients of scalar node ``loss`` w.r.t. every parameter."""
        if self._values is None:
            raise GraphError("forward has not been evaluated")
        vals = self._values
        if np.ndim(vals[loss]) != 0:
            raise GraphError(f"loss node #{loss} is not scalar (shape {np.shape(vals[loss])})")
        adj = [None] * len(self.nodes)
        adj[loss] = np.ones((), dtype=DTYPE)
        owned = set()   # adjoints that are private buffers, safe to update in place
        needs = self._needs_grad()
        for i in range(loss, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.op in ("input", "param", "const"):
                continue
            if node.op == "slice":
                # scatter straight into the parent's adjoint instead of a zero-padded copy
                j = node.inputs[0]
                if j not in owned:
                    adj[j] = np.zeros_like(vals[j]) if adj[j] is None else adj[j].copy()
                    owned.add(j)
                idx = [slice(None)] * vals[j].ndim
                idx[node.attrs["axis"]] = slice(node.attrs["start"], node.attrs["stop"])
                adj[j][tuple(idx)] += g
                continue
            want = tuple(needs[j] for j in node.inputs)
            for j, gj in zip(node.inputs, self._vjp(node, g, vals, i, want)):
                if gj is None:
                    continue
                if adj[j] is None:
                    adj[j] = gj
                else:
                    adj[j] = adj[j] + gj
                    owned.add(j)
        grads = {}
        for name, nid in self._param_nodes.items():
            g = adj[nid]
            grads[name] = np.zeros_like(self.params[name]) if g is None else _unbroadcast(g, self.params[name].shape)
        return grads

    def _needs_grad(self) -> list[bool]:
        """Per node: does any parameter feed into it?"""
        needs = []
        for node in self.nodes:
            needs.append(node.op == "param" or any(needs[j] for j in node.inputs))
        return needs

    def _vjp(self, node, g, vals, i, want=(True, True)):
        """Adjoints for the inputs of node ``i``; entries not in ``want`` may be None."""
        op = node.op
        a = [vals[j] for j in node.inputs]
        if op == "add":
            return _unbroadcast(g, a[0].shape), _unbroadcast(g, a[1].shape)
        if op == "sub":
            return _unbroadcast(g, a[0].shape), -_unbroadcast(g, a[1].shape)
        if op == "mul":
            return (_unbroadcast(g * a[1], a[0].shape) if want[0] else None,
                    _unbroadcast(g * a[0], a[1].shape) if want[1] else None)
        if op == "matmul":
            return _matmul_grads(a[0], a[1], g, want)
        if op == "conv1d":
            x, w = a
            kt, cin, cout = w.shape
            gw = gx = None
            if want[1]:
                cols = _im2col(x, kt)
                gw = (cols.reshape(-1, kt * cin).T @ g.reshape(-1, cout)).reshape(w.shape)
            if want[0]:
                gcols = _mm(g, w.reshape(-1, cout).T).reshape(g.shape[:-1] + (kt, cin))
                gx = np.zeros_like(x)
                length = g.shape[-2]
                for k in range(kt):
                    gx[..., k:k + length, :] += gcols[..., k, :]
            return gx, gw
        if op == "elu":
            # exp(x) = elu(x) + 1 on the negative side
            return (g * np.where(a[0] > 0, 1.0, vals[i] + 1.0),)
        if op == "sigmoid":
            s = vals[i]
            return (g * s * (1.0 - s),)
        if op == "abs":
            return (g * np.sign(a[0]),)
        if op == "concat":
            ax = node.attrs["axis"]
            edges = np.cumsum([v.shape[ax] for v in a])[:-1]
            return tuple(np.split(g, edges, axis=ax))
        if op == "slice":
            out = np.zeros_like(a[0])
            idx = [slice(None)] * a[0].ndim
            idx[node.attrs["axis"]] = slice(node.attrs["start"], node.attrs["stop"])
            out[tuple(idx)] = g
            return (out,)
        if op == "reshape":
            return (g.reshape(a[0].shape),)
        if op == "mean":
            return (np.full(a[0].shape, g / a[0].size),)
        if op == "sum":
            return (np.full(a[0].shape, g, dtype=DTYPE),)
        raise GraphError(f"node #{i}: unknown operator {op!r}")


def _mm(a, b):
    """``a @ b`` for 2-D ``b`` as one GEMM over the flattened stack of ``a``."""
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))


def _im2col(x, kt):
    """(..., len, C) -> (..., len-kt+1, kt*C), taps ordered k-major."""
    length = x.shape[-2] - kt + 1
    return np.concatenate([x[..., k:k + length, :] for k in range(kt)], axis=-1)


def _matmul_grads(a, b, g, want=(True, True)):
    ga = gb = None
    if b.ndim == 2 and a.ndim > 2:
        # shared right operand: collapse the stack into one GEMM
        if want[0]:
            ga = _mm(g, b.T)
        if want[1]:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    if a.ndim == 2 and b.ndim > 2:
        if want[1]:
            gb = a.T @ g
        if want[0]:
            gt = np.swapaxes(g, -1, -2).reshape(-1, g.shape[-2])
            bt = np.swapaxes(b, -1, -2).reshape(-1, b.shape[-2])
            ga = gt.T @ bt
        return ga, gb
    if want[0]:
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    if want[1]:
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


# ------------------------------------------------------------------- checking
def _abs_inputs(graph):
    return [n.inputs[0] for n in graph.nodes if n.op == "abs"]


def near_kink(graph, h):
    """True if any |.| node input lies within 10h of zero at the last forward."""
    return any(np.any(np.abs(graph.value(j)) < 10 * h) for j in _abs_inputs(graph))


def finite_difference_check(graph: Graph, inputs: dict, loss: int, param: str, probes: int = 32,
                            h: float = 1e-5, rng=None,
                            resample: Callable[[np.random.Generator], dict] | None = None,
                            max_resamples: int = 20) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes ``probes`` random coordinates of ``param``. If an absolute-value
    kink sits within ``10 h`` of the evaluation point, ``resample`` is asked
    for fresh inputs; without it a ``ValueError`` is raised.
    """
    rng = np.random.default_rng(rng)
    for _ in range(max_resamples + 1):
        graph.forward(inputs)
        if not near_kink(graph, h):
            break
        if resample is None:
            raise ValueError("evaluation point lies on an |.| kink; supply resample")
        inputs = resample(rng)
    else:
        raise ValueError("could not find a kink-free evaluation point")
    analytic = graph.backward(loss)[param]
    theta = graph.params[param]
    flat = theta.reshape(-1)
    coords = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        up = float(graph.forward(inputs)[_key(graph, loss)])
        flat[c] = orig - h
        down = float(graph.forward(inputs)[_key(graph, loss)])
        flat[c] = orig
        numeric = (up - down) / (2 * h)
        a = analytic.reshape(-1)[c]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    graph.forward(inputs)
    return worst


def _key(graph, node):
    return graph.nodes[node].name or node


# ------------------------------------------------------------------ optimizer
def glorot_uniform(shape, fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AdamState:
    base_lr: float = 1e-3
    decay_rate: float = 0.98
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def effective_lr(self, epoch: int) -> float:
        return self.base_lr * self.decay_rate ** epoch


def adam_step(state: AdamState, params: dict, grads: dict, epoch: int) -> None:
    """In-place Adam update with learning rate ``base_lr * decay_rate**epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step_count += 1
    t = state.step_count
    lr = state.effective_lr(epoch)
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(g)
            state.second_moment[name] = np.zeros_like(g)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_hat)
