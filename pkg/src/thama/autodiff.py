"""Static compute graphs with reverse-mode differentiation over numpy arrays.

A :class:`ComputeGraph` is built once from primitive operations. Leaves are
either named inputs (placeholders bound on every call) or named parameters
(trainable arrays owned by the graph). Every node carries a per-record
``shape``; nodes derived from batched inputs additionally carry a leading
batch axis at run time, so the same graph serves any batch size.

Evaluation never mutates the graph: :meth:`ComputeGraph.forward` returns an
:class:`Evaluation` holding every intermediate value, and
:meth:`ComputeGraph.backward` consumes it.

    g = ComputeGraph()
    x = g.input("x", (3,))
    w = g.param("w", np.ones((3, 2)))
    loss = g.reduce_mean(g.relu(g.matmul(x, w)))
    ev = g.forward({"x": batch})
    grads = g.backward(ev, loss)
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from thama.errors import NonFiniteError, NumericalError, ShapeError

__all__ = ["ComputeGraph", "Node", "Evaluation", "grad_check"]

BATCH_LETTER = "Z"


@dataclass(eq=False)
class Node:
    id: int
    op: "Primitive | None"
    inputs: tuple["Node", ...]
    shape: tuple[int, ...]
    batched: bool
    name: str
    kind: str = "op"  # "op" | "input" | "param"
    requires_grad: bool = False

    def __repr__(self):
        return f"Node({self.name!r}, shape={self.shape}, batched={self.batched})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@functools.lru_cache(maxsize=512)
def _einsum_path(subscripts: str, *shapes: tuple[int, ...]):
    dummies = [np.empty(s, dtype=np.float32) for s in shapes]
    return np.einsum_path(subscripts, *dummies, optimize="optimal")[0]


def _einsum(subscripts: str, *operands: np.ndarray) -> np.ndarray:
    if len(operands) <= 2:
        return np.einsum(subscripts, *operands, optimize=True)
    path = _einsum_path(subscripts, *(op.shape for op in operands))
    return np.einsum(subscripts, *operands, optimize=path)


def _multilinear_delta(f, values, deltas):
    """f(v + d) - f(v) for f linear in each argument: sum over nonempty subsets of changed args."""
    changed = [i for i, d in enumerate(deltas) if d is not None]
    total = None
    for mask in range(1, 2 ** len(changed)):
        args = list(values)
        for bit, i in enumerate(changed):
            if mask >> bit & 1:
                args[i] = deltas[i]
        term = f(*args)
        total = term if total is None else total + term
    return total


def _direct_delta(new, old, exact, fallback):
    """Use ``exact`` where the cheap closed form applies, else new - old."""
    return np.where(exact, fallback, new - old)


class RunContext:
    def __init__(self, training, rng, masks):
        self.training = training
        self.rng = rng
        self.masks = {} if masks is None else masks


class Primitive:
    """Forward/backward rule for one node type."""

    name = "primitive"

    def forward(self, node: Node, values: list[np.ndarray], ctx: RunContext):
        """Return ``(output, cache)``."""
        raise NotImplementedError

    def backward(self, node: Node, grad: np.ndarray, values, cache, needs: list[bool]):
        """Return one gradient (or None) per input."""
        raise NotImplementedError

    def delta(self, node: Node, values, deltas, out, cache, ctx: RunContext):
        """``f(values + deltas) - out`` computed without cancellation where possible.

        ``deltas`` holds None for unchanged inputs. The default evaluates the
        shifted point and subtracts.
        """
        shifted = [v if d is None else v + d for v, d in zip(values, deltas)]
        new, _ = self.forward(node, shifted, ctx)
        return new - out


class Add(Primitive):
    name = "add"

    def forward(self, node, values, ctx):
        return values[0] + values[1], None

    def backward(self, node, grad, values, cache, needs):
        return [_unbroadcast(grad, v.shape) if n else None for v, n in zip(values, needs)]

    def delta(self, node, values, deltas, out, cache, ctx):
        present = [d for d in deltas if d is not None]
        return np.broadcast_to(sum(present[1:], present[0]), out.shape)


class Mul(Primitive):
    name = "mul"

    def forward(self, node, values, ctx):
        return values[0] * values[1], None

    def backward(self, node, grad, values, cache, needs):
        a, b = values
        return [
            _unbroadcast(grad * b, a.shape) if needs[0] else None,
            _unbroadcast(grad * a, b.shape) if needs[1] else None,
        ]

    def delta(self, node, values, deltas, out, cache, ctx):
        return _multilinear_delta(np.multiply, values, deltas)


class Einsum(Primitive):
    """Multi-operand tensor contraction; covers matmul and mode-n products."""

    name = "einsum"

    def __init__(self, in_subs: Sequence[str], out_subs: str):
        self.in_subs = list(in_subs)
        self.out_subs = out_subs
        self.expr = ",".join(self.in_subs) + "->" + out_subs

    def forward(self, node, values, ctx):
        return _einsum(self.expr, *values), None

    def backward(self, node, grad, values, cache, needs):
        grads = []
        for i, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            others = [j for j in range(len(values)) if j != i]
            expr = ",".join([self.out_subs] + [self.in_subs[j] for j in others])
            expr += "->" + self.in_subs[i]
            grads.append(_einsum(expr, grad, *(values[j] for j in others)))
        return grads

    def delta(self, node, values, deltas, out, cache, ctx):
        return _multilinear_delta(lambda *ops: _einsum(self.expr, *ops), values, deltas)


class Conv1D(Primitive):
    """Cross-correlation, zero "same" padding, odd kernel width, bias per channel."""

    name = "conv1d"

    def forward(self, node, values, ctx):
        x, kernel, bias = values
        batch, c_in, length = x.shape
        c_out, _, width = kernel.shape
        pad = width // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, width, axis=2)
        # (B, C, L, K) -> (B*L, C*K)
        cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(batch * length, c_in * width)
        out = cols @ kernel.reshape(c_out, c_in * width).T
        out = out.reshape(batch, length, c_out).transpose(0, 2, 1) + bias[:, None]
        return np.ascontiguousarray(out), cols

    def backward(self, node, grad, values, cache, needs):
        x, kernel, _ = values
        cols = cache
        batch, c_in, length = x.shape
        c_out, _, width = kernel.shape
        pad = width // 2
        g2 = np.ascontiguousarray(grad.transpose(0, 2, 1)).reshape(batch * length, c_out)
        dx = dk = db = None
        if needs[1]:
            dk = (g2.T @ cols).reshape(kernel.shape)
        if needs[2]:
            db = grad.sum(axis=(0, 2))
        if needs[0]:
            dcols = (g2 @ kernel.reshape(c_out, c_in * width)).reshape(batch, length, c_in, width)
            dxp = np.zeros((batch, c_in, length + 2 * pad), dtype=grad.dtype)
            for k in range(width):
                dxp[:, :, k : k + length] += dcols[:, :, :, k].transpose(0, 2, 1)
            dx = dxp[:, :, pad : pad + length]
        return [dx, dk, db]

    def delta(self, node, values, deltas, out, cache, ctx):
        x, kernel, bias = values
        zero = np.zeros_like(bias)

        def conv(xx, kk):
            if xx.ndim == 2:  # a delta of x always keeps the batch axis; guard anyway
                xx = xx[None]
            return self.forward(node, [np.broadcast_to(xx, x.shape), kk, zero], ctx)[0]

        d = _multilinear_delta(conv, [x, kernel], deltas[:2])
        if deltas[2] is not None:
            db = np.broadcast_to(deltas[2][:, None], out.shape[1:])
            d = db if d is None else d + db
        return d


class MaxPool1D(Primitive):
    """Non-overlapping windows of 2 on the last axis; a trailing odd element is dropped."""

    name = "maxpool1d"

    def forward(self, node, values, ctx):
        (x,) = values
        half = x.shape[-1] // 2
        left = x[..., 0 : 2 * half : 2]
        right = x[..., 1 : 2 * half : 2]
        # ties route to the first (left) element
        take_right = right > left
        return np.where(take_right, right, left), take_right

    def backward(self, node, grad, values, cache, needs):
        (x,) = values
        take_right = cache
        half = x.shape[-1] // 2
        dx = np.zeros(x.shape, dtype=grad.dtype)
        dx[..., 0 : 2 * half : 2] = np.where(take_right, 0, grad)
        dx[..., 1 : 2 * half : 2] = np.where(take_right, grad, 0)
        return [dx]

    def delta(self, node, values, deltas, out, cache, ctx):
        (x,), (d,) = values, deltas
        half = x.shape[-1] // 2
        new, new_right = self.forward(node, [x + d], ctx)
        d_left, d_right = d[..., 0 : 2 * half : 2], d[..., 1 : 2 * half : 2]
        same = new_right == cache
        return _direct_delta(new, out, same, np.where(cache, d_right, d_left))


class ReLU(Primitive):
    name = "relu"

    def forward(self, node, values, ctx):
        return np.maximum(values[0], 0), None

    def backward(self, node, grad, values, cache, needs):
        return [grad * (values[0] > 0)]

    def delta(self, node, values, deltas, out, cache, ctx):
        (x,), (d,) = values, deltas
        shifted = x + d
        both_on = (x > 0) & (shifted > 0)
        both_off = (x <= 0) & (shifted <= 0)
        return _direct_delta(np.maximum(shifted, 0) - out, 0.0, both_on | both_off, np.where(both_on, d, 0.0))


class Sigmoid(Primitive):
    name = "sigmoid"

    def forward(self, node, values, ctx):
        # tanh form stays finite for large |x|
        out = 0.5 * (1.0 + np.tanh(0.5 * values[0]))
        return out, out

    def backward(self, node, grad, values, cache, needs):
        s = cache
        return [grad * s * (1.0 - s)]

    def delta(self, node, values, deltas, out, cache, ctx):
        (x,), (d,) = values, deltas
        # tanh(a) - tanh(b) = sinh(a - b) / (cosh(a) cosh(b))
        with np.errstate(over="ignore", invalid="ignore"):
            closed = 0.5 * np.sinh(0.5 * d) / (np.cosh(0.5 * x) * np.cosh(0.5 * (x + d)))
        new = 0.5 * (1.0 + np.tanh(0.5 * (x + d)))
        return _direct_delta(new, out, np.isfinite(closed), closed)


class Dropout(Primitive):
    """Inverted dropout. Masks come from ``ctx.masks`` if given, else from ``ctx.rng``."""

    name = "dropout"

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, node, values, ctx):
        (x,) = values
        if not ctx.training or self.rate == 0.0:
            return x, None
        mask = ctx.masks.get(node.name)
        if mask is None:
            if ctx.rng is None:
                raise ValueError(f"training-mode dropout node {node.name!r} needs an rng or a fixed mask")
            keep = ctx.rng.random(x.shape) >= self.rate
            mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.rate)
            ctx.masks[node.name] = mask
        elif mask.shape != x.shape:
            raise ShapeError(f"fixed dropout mask for {node.name!r} has shape {mask.shape}, expected {x.shape}")
        return x * mask, mask

    def backward(self, node, grad, values, cache, needs):
        return [grad if cache is None else grad * cache]

    def delta(self, node, values, deltas, out, cache, ctx):
        return deltas[0] if cache is None else deltas[0] * cache


class Concat(Primitive):
    name = "concat"

    def forward(self, node, values, ctx):
        return np.concatenate(values, axis=-1), None

    def backward(self, node, grad, values, cache, needs):
        splits = np.cumsum([v.shape[-1] for v in values])[:-1]
        parts = np.split(grad, splits, axis=-1)
        return [p if n else None for p, n in zip(parts, needs)]

    def delta(self, node, values, deltas, out, cache, ctx):
        return np.concatenate([np.zeros_like(v) if d is None else d for v, d in zip(values, deltas)], axis=-1)


class ReduceMean(Primitive):
    """Mean over every element (including the batch axis) -> scalar."""

    name = "reduce_mean"

    def forward(self, node, values, ctx):
        return np.asarray(values[0].mean(), dtype=values[0].dtype), None

    def backward(self, node, grad, values, cache, needs):
        x = values[0]
        return [np.full(x.shape, grad / x.size, dtype=x.dtype)]

    def delta(self, node, values, deltas, out, cache, ctx):
        return np.asarray(np.broadcast_to(deltas[0], values[0].shape).mean(), dtype=out.dtype)


class Reshape(Primitive):
    name = "reshape"

    def forward(self, node, values, ctx):
        x = values[0]
        lead = (x.shape[0],) if node.batched else ()
        return x.reshape(lead + node.shape), None

    def backward(self, node, grad, values, cache, needs):
        return [grad.reshape(values[0].shape)]

    def delta(self, node, values, deltas, out, cache, ctx):
        return np.broadcast_to(deltas[0], values[0].shape).reshape(out.shape)


class BCE(Primitive):
    """Mean binary cross-entropy of probabilities against 0/1 labels."""

    name = "bce"

    def __init__(self, clamp: float = 1e-7):
        self.clamp = clamp

    def forward(self, node, values, ctx):
        p, y = values
        pc = np.clip(p, self.clamp, 1.0 - self.clamp)
        loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
        return np.asarray(loss.mean(), dtype=p.dtype), pc

    def backward(self, node, grad, values, cache, needs):
        p, y = values
        pc = cache
        inside = (p > self.clamp) & (p < 1.0 - self.clamp)
        dp = (-(y / pc) + (1.0 - y) / (1.0 - pc)) * inside * (grad / p.size)
        return [dp.astype(p.dtype, copy=False), None]

    def delta(self, node, values, deltas, out, cache, ctx):
        (p, y), d = values, deltas[0]
        lo, hi = self.clamp, 1.0 - self.clamp
        q = p + d
        qc = np.clip(q, lo, hi)
        pc = cache
        direct = -(y * np.log(qc) + (1.0 - y) * np.log1p(-qc)) + (y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
        with np.errstate(divide="ignore", invalid="ignore"):
            closed = -(y * np.log1p(d / p) + (1.0 - y) * np.log1p(-d / (1.0 - p)))
        inside = (p > lo) & (p < hi) & (q > lo) & (q < hi)
        return np.asarray(_direct_delta(direct, 0.0, inside, closed).mean(), dtype=out.dtype)


class BCEWithLogits(Primitive):
    """Mean binary cross-entropy evaluated from logits.

    Equal to ``BCE(sigmoid(s), y)`` wherever the probability clamp is
    inactive, but keeps a nonzero gradient when the sigmoid saturates.
    """

    name = "bce_logits"

    def forward(self, node, values, ctx):
        s, y = values
        loss = np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))
        return np.asarray(loss.mean(), dtype=s.dtype), None

    def backward(self, node, grad, values, cache, needs):
        s, y = values
        prob = 0.5 * (1.0 + np.tanh(0.5 * s))
        return [((prob - y) * (grad / s.size)).astype(s.dtype, copy=False), None]

    def delta(self, node, values, deltas, out, cache, ctx):
        (s, y), d = values, deltas[0]
        # softplus(s + d) - softplus(s) = log1p(sigmoid(s) * expm1(d))
        prob = 0.5 * (1.0 + np.tanh(0.5 * s))
        with np.errstate(over="ignore", invalid="ignore"):
            closed = np.log1p(prob * np.expm1(d))
        shifted = s + d
        direct = np.maximum(shifted, 0) + np.log1p(np.exp(-np.abs(shifted))) - np.maximum(s, 0) - np.log1p(np.exp(-np.abs(s)))
        per = _direct_delta(direct, 0.0, np.isfinite(closed), closed) - d * y
        return np.asarray(per.mean(), dtype=out.dtype)


class Evaluation(Mapping):
    """Values produced by one forward pass, keyed by node or node name."""

    def __init__(self, graph, values, caches, batch_size, masks, training=False):
        self.graph = graph
        self.training = training
        self.values = values
        self.caches = caches
        self.batch_size = batch_size
        self.masks = masks

    def _key(self, key):
        if isinstance(key, Node):
            return key.id
        return self.graph.node(key).id

    def __getitem__(self, key):
        return self.values[self._key(key)]

    def __iter__(self):
        return (self.graph.nodes[i].name for i in self.values)

    def __len__(self):
        return len(self.values)


class ComputeGraph:
    def __init__(self, dtype=np.float32, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError("dtype must be float32 or float64")
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self._by_name: dict[str, Node] = {}

    # ------------------------------------------------------------------ build
    def _add(self, op, inputs, shape, batched, name=None, kind="op", requires_grad=None):
        if name is None:
            name = f"{op.name if op else kind}_{len(self.nodes)}"
        if name in self._by_name:
            raise ValueError(f"duplicate node name {name!r}")
        if requires_grad is None:
            requires_grad = any(n.requires_grad for n in inputs)
        node = Node(len(self.nodes), op, tuple(inputs), tuple(int(s) for s in shape), batched, name, kind, requires_grad)
        self.nodes.append(node)
        self._by_name[name] = node
        return node

    def node(self, name: str) -> Node:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no node named {name!r}") from None

    def input(self, name: str, shape: Sequence[int], batched: bool = True) -> Node:
        if any(int(s) < 1 for s in shape):
            raise ShapeError(f"input {name!r}: extents must be positive, got {tuple(shape)}")
        return self._add(None, (), shape, batched, name=name, kind="input", requires_grad=False)

    def param(self, name: str, value: np.ndarray, trainable: bool = True) -> Node:
        value = np.array(value, dtype=self.dtype)
        if value.ndim == 0 or any(s < 1 for s in value.shape):
            raise ShapeError(f"parameter {name!r}: extents must be positive, got {value.shape}")
        self.params[name] = value
        return self._add(None, (), value.shape, False, name=name, kind="param", requires_grad=trainable)

    @property
    def trainable(self) -> list[str]:
        return [n.name for n in self.nodes if n.kind == "param" and n.requires_grad]

    def _elementwise(self, op, a, b, name):
        if a.batched and b.batched and a.shape != b.shape:
            raise ShapeError(f"{op.name}: batched operands must match, got {a.shape} and {b.shape}")
        try:
            shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"{op.name}: shapes {a.shape} and {b.shape} do not broadcast") from None
        if a.batched != b.batched:
            big = a if a.batched else b
            small = b if a.batched else a
            if len(small.shape) > len(big.shape) or shape != big.shape:
                raise ShapeError(f"{op.name}: {small.shape} cannot broadcast into batched {big.shape}")
        return self._add(op, (a, b), shape, a.batched or b.batched, name)

    def add(self, a, b, name=None):
        return self._elementwise(Add(), a, b, name)

    def mul(self, a, b, name=None):
        return self._elementwise(Mul(), a, b, name)

    def einsum(self, subscripts: str, *operands: Node, name=None) -> Node:
        """Contract per-record operands; the batch axis is handled implicitly.

        Every index of an operand must appear in the output or in another
        operand, so each operand gradient is itself a contraction.
        """
        if "->" not in subscripts:
            raise ValueError("einsum subscripts need an explicit '->' output")
        lhs, out = subscripts.replace(" ", "").split("->")
        in_subs = lhs.split(",")
        if len(in_subs) != len(operands):
            raise ShapeError(f"einsum {subscripts!r}: {len(operands)} operands for {len(in_subs)} terms")
        extents: dict[str, int] = {}
        for subs, node in zip(in_subs, operands):
            if BATCH_LETTER in subs or len(set(subs)) != len(subs):
                raise ShapeError(f"einsum term {subs!r}: repeated or reserved index")
            if len(subs) != len(node.shape):
                raise ShapeError(f"einsum term {subs!r} does not match operand shape {node.shape}")
            for letter, extent in zip(subs, node.shape):
                if extents.setdefault(letter, extent) != extent:
                    raise ShapeError(f"einsum {subscripts!r}: index {letter!r} has extents {extents[letter]} and {extent}")
        for i, subs in enumerate(in_subs):
            others = set(out).union(*(in_subs[j] for j in range(len(in_subs)) if j != i))
            if not set(subs) <= others:
                raise ShapeError(f"einsum term {subs!r} has an index summed only within itself")
        if not set(out) <= set(extents) or len(set(out)) != len(out):
            raise ShapeError(f"einsum output {out!r} is invalid")
        batched = any(n.batched for n in operands)
        full_in = [BATCH_LETTER + s if n.batched else s for s, n in zip(in_subs, operands)]
        full_out = BATCH_LETTER + out if batched else out
        shape = tuple(extents[c] for c in out)
        return self._add(Einsum(full_in, full_out), operands, shape, batched, name)

    def matmul(self, a: Node, b: Node, name=None) -> Node:
        """Matrix/vector product on per-record shapes: [n]@[n,m], [k,n]@[n,m], [k,n]@[n]."""
        la = "i" if len(a.shape) == 1 else "ki" if len(a.shape) == 2 else None
        lb = "ij" if len(b.shape) == 2 else "i" if len(b.shape) == 1 else None
        if la is None or lb is None or (len(a.shape) == 1 and len(b.shape) == 1):
            raise ShapeError(f"matmul: unsupported shapes {a.shape} @ {b.shape}")
        out = (la.replace("i", "") + lb.replace("i", ""))
        return self.einsum(f"{la},{lb}->{out}", a, b, name=name)

    def conv1d(self, x: Node, kernel: Node, bias: Node, name=None) -> Node:
        if len(x.shape) != 2 or len(kernel.shape) != 3 or len(bias.shape) != 1:
            raise ShapeError(f"conv1d: expected x [C,L], kernel [O,C,K], bias [O]; got {x.shape}, {kernel.shape}, {bias.shape}")
        if kernel.batched or bias.batched or not x.batched:
            raise ShapeError("conv1d: x must be batched, kernel and bias must not be")
        c_out, c_in, width = kernel.shape
        if x.shape[0] != c_in:
            raise ShapeError(f"conv1d: input has {x.shape[0]} channels, kernel expects {c_in}")
        if bias.shape[0] != c_out or width % 2 == 0:
            raise ShapeError(f"conv1d: bias {bias.shape} / kernel width {width} invalid")
        return self._add(Conv1D(), (x, kernel, bias), (c_out, x.shape[1]), True, name)

    def maxpool1d(self, x: Node, name=None) -> Node:
        if not x.shape or x.shape[-1] < 2:
            raise ShapeError(f"maxpool1d: last extent must be >= 2, got {x.shape}")
        return self._add(MaxPool1D(), (x,), x.shape[:-1] + (x.shape[-1] // 2,), x.batched, name)

    def relu(self, x, name=None):
        return self._add(ReLU(), (x,), x.shape, x.batched, name)

    def sigmoid(self, x, name=None):
        return self._add(Sigmoid(), (x,), x.shape, x.batched, name)

    def dropout(self, x, rate: float, name=None):
        return self._add(Dropout(rate), (x,), x.shape, x.batched, name)

    def concat(self, nodes: Sequence[Node], name=None) -> Node:
        nodes = tuple(nodes)
        if len(nodes) < 2:
            raise ShapeError("concat needs at least two operands")
        if len({n.batched for n in nodes}) != 1 or len({n.shape[:-1] for n in nodes}) != 1:
            raise ShapeError(f"concat: incompatible operands {[n.shape for n in nodes]}")
        shape = nodes[0].shape[:-1] + (sum(n.shape[-1] for n in nodes),)
        return self._add(Concat(), nodes, shape, nodes[0].batched, name)

    def reshape(self, x: Node, shape: Sequence[int], name=None) -> Node:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != int(np.prod(x.shape)):
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
        return self._add(Reshape(), (x,), shape, x.batched, name)

    def flatten(self, x: Node, name=None) -> Node:
        return self.reshape(x, (int(np.prod(x.shape)),), name=name)

    def reduce_mean(self, x, name=None):
        return self._add(ReduceMean(), (x,), (), False, name)

    def bce(self, prob: Node, labels: Node, clamp: float = 1e-7, name=None) -> Node:
        if prob.shape != labels.shape or prob.batched != labels.batched:
            raise ShapeError(f"bce: probabilities {prob.shape} and labels {labels.shape} differ")
        if labels.requires_grad:
            raise ShapeError("bce: labels must not depend on trainable parameters")
        return self._add(BCE(clamp), (prob, labels), (), False, name)

    def bce_logits(self, logits: Node, labels: Node, name=None) -> Node:
        if logits.shape != labels.shape or logits.batched != labels.batched:
            raise ShapeError(f"bce_logits: logits {logits.shape} and labels {labels.shape} differ")
        if labels.requires_grad:
            raise ShapeError("bce_logits: labels must not depend on trainable parameters")
        return self._add(BCEWithLogits(), (logits, labels), (), False, name)

    # -------------------------------------------------------------- execute
    def _ancestors(self, targets: Sequence[Node]) -> list[Node]:
        seen = set()
        stack = list(targets)
        while stack:
            n = stack.pop()
            if n.id in seen:
                continue
            seen.add(n.id)
            stack.extend(n.inputs)
        # node ids are a topological order by construction
        return [self.nodes[i] for i in sorted(seen)]

    def forward(
        self,
        bindings: Mapping[str, np.ndarray],
        outputs: Sequence[Node | str] | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
        masks: dict[str, np.ndarray] | None = None,
    ) -> Evaluation:
        """Evaluate the sub-graph needed for ``outputs`` (default: every node)."""
        if outputs is None:
            targets = list(self.nodes)
        else:
            targets = [o if isinstance(o, Node) else self.node(o) for o in outputs]
        order = self._ancestors(targets)
        ctx = RunContext(training, rng, None if masks is None else dict(masks))
        values: dict[int, np.ndarray] = {}
        caches: dict[int, object] = {}
        batch_size = None
        for node in order:
            if node.kind == "input":
                if node.name not in bindings:
                    raise KeyError(f"input {node.name!r} is not bound")
                value = np.asarray(bindings[node.name], dtype=self.dtype)
                expected = node.shape
                if node.batched:
                    if value.ndim != len(expected) + 1 or value.shape[1:] != expected:
                        raise ShapeError(f"input {node.name!r}: expected (B, {expected}), got {value.shape}")
                    if batch_size is None:
                        batch_size = value.shape[0]
                    elif value.shape[0] != batch_size:
                        raise ShapeError(f"input {node.name!r}: batch {value.shape[0]} != {batch_size}")
                    if value.shape[0] < 1:
                        raise ShapeError("empty batch")
                elif value.shape != expected:
                    raise ShapeError(f"input {node.name!r}: expected {expected}, got {value.shape}")
            elif node.kind == "param":
                value = self.params[node.name]
            else:
                args = [values[i.id] for i in node.inputs]
                with np.errstate(over="ignore", invalid="ignore"):
                    value, cache = node.op.forward(node, args, ctx)
                if cache is not None:
                    caches[node.id] = cache
            if self.check_finite and not np.all(np.isfinite(value)):
                raise NonFiniteError(f"non-finite value produced at node {node.name!r}", node=node.name)
            values[node.id] = value
        return Evaluation(self, values, caches, batch_size, ctx.masks, training)

    def _descendants(self, node: Node) -> set[int]:
        out = {node.id}
        for n in self.nodes[node.id + 1 :]:
            if any(i.id in out for i in n.inputs):
                out.add(n.id)
        return out

    def reevaluate(self, evaluation: Evaluation, changed: str, target: Node | str) -> np.ndarray:
        """Value of ``target`` after parameter ``changed`` was edited in place.

        Nodes that do not depend on ``changed`` keep their values from
        ``evaluation``; recorded dropout masks are reused.
        """
        target = target if isinstance(target, Node) else self.node(target)
        dirty = self._descendants(self.node(changed))
        ctx = RunContext(evaluation.training, None, dict(evaluation.masks))
        values = dict(evaluation.values)
        for node in self._ancestors([target]):
            if node.id not in dirty:
                continue
            if node.kind == "param":
                value = self.params[node.name]
            else:
                with np.errstate(over="ignore", invalid="ignore"):
                    value, _ = node.op.forward(node, [values[i.id] for i in node.inputs], ctx)
            if self.check_finite and not np.all(np.isfinite(value)):
                raise NonFiniteError(f"non-finite value produced at node {node.name!r}", node=node.name)
            values[node.id] = value
        return values[target.id]

    def perturbation_delta(self, evaluation: Evaluation, changed: str, delta: np.ndarray, target: Node | str):
        """Change of ``target`` when parameter ``changed`` moves by ``delta``.

        Differences are pushed through the graph directly, so a small step
        is not swamped by rounding of the (much larger) values themselves.
        """
        target = target if isinstance(target, Node) else self.node(target)
        source = self.node(changed)
        dirty = self._descendants(source)
        ctx = RunContext(evaluation.training, None, dict(evaluation.masks))
        deltas: dict[int, np.ndarray] = {source.id: np.asarray(delta, dtype=self.dtype)}
        for node in self._ancestors([target]):
            if node.id not in dirty or node.id == source.id:
                continue
            ins = [deltas.get(i.id) for i in node.inputs]
            if all(d is None for d in ins):
                continue
            values = [evaluation.values[i.id] for i in node.inputs]
            with np.errstate(over="ignore", invalid="ignore"):
                d = node.op.delta(node, values, ins, evaluation.values[node.id], evaluation.caches.get(node.id), ctx)
            if self.check_finite and not np.all(np.isfinite(d)):
                raise NonFiniteError(f"non-finite perturbation at node {node.name!r}", node=node.name)
            deltas[node.id] = d
        if target.id not in deltas:
            return np.zeros_like(evaluation.values[target.id])
        return deltas[target.id]

    def backward(self, evaluation: Evaluation | None, loss: Node | str) -> dict[str, np.ndarray]:
        """Exact gradients of a scalar ``loss`` with respect to reachable trainable parameters."""
        if isinstance(loss, str):
            loss = self.node(loss)
        if evaluation is None or loss.id not in evaluation.values:
            raise ValueError(f"loss node {loss.name!r} has not been evaluated; call forward first")
        if loss.shape != () or loss.batched:
            raise ShapeError(f"loss must be a scalar, node {loss.name!r} has shape {loss.shape}")
        value = evaluation.values[loss.id]
        if not np.isfinite(value):
            raise NonFiniteError(f"loss {loss.name!r} is not finite", node=loss.name)
        order = self._ancestors([loss])
        grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=self.dtype)}
        out: dict[str, np.ndarray] = {}
        for node in reversed(order):
            if not node.requires_grad:
                continue
            grad = grads.pop(node.id, None)
            if node.kind == "param":
                out[node.name] = np.zeros_like(self.params[node.name]) if grad is None else grad
                continue
            if grad is None or node.kind == "input":
                continue
            needs = [i.requires_grad for i in node.inputs]
            args = [evaluation.values[i.id] for i in node.inputs]
            in_grads = node.op.backward(node, grad, args, evaluation.caches.get(node.id), needs)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + g
                else:
                    grads[inp.id] = g
        for name in out:
            if out[name].shape != self.params[name].shape:
                out[name] = out[name].reshape(self.params[name].shape)
        return {name: out[name] for name in sorted(out, key=lambda n: self._by_name[n].id)}


def grad_check(
    graph: ComputeGraph,
    loss: Node | str,
    bindings: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    analytic: Mapping[str, np.ndarray] | None = None,
    exhaustive_limit: int = 10_000,
    samples_per_param: int = 256,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Graphs with at most ``exhaustive_limit`` trainable scalars are perturbed
    coordinate by coordinate; larger graphs get ``samples_per_param`` seeded,
    uniformly drawn coordinates per parameter tensor. Dropout masks drawn by
    the first forward pass are frozen for every perturbed evaluation.
    ``analytic`` overrides the gradients under test.

    The two loss changes L(p + eps) - L(p) and L(p - eps) - L(p) come from
    :meth:`ComputeGraph.perturbation_delta`, which propagates differences
    instead of subtracting two nearly equal losses; their difference over
    2 * eps is the usual central difference, without the O(u * |L| / eps)
    cancellation floor.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if graph.dtype != np.float64:
        raise NumericalError("grad_check requires a graph built in 64-bit mode")
    if isinstance(loss, str):
        loss = graph.node(loss)
    ev = graph.forward(bindings, outputs=[loss], training=training, rng=rng)
    if analytic is None:
        analytic = graph.backward(ev, loss)

    def loss_change(name, c, step):
        d = np.zeros_like(graph.params[name])
        d.reshape(-1)[c] = step
        return float(graph.perturbation_delta(ev, name, d, loss))

    total = sum(graph.params[n].size for n in analytic)
    sampler = np.random.default_rng(seed)
    worst = 0.0
    for name, grad in analytic.items():
        param = graph.params[name]
        if total <= exhaustive_limit:
            coords = range(param.size)
        else:
            coords = sampler.integers(0, param.size, size=samples_per_param)
        gflat = np.asarray(grad).reshape(-1)
        for c in coords:
            numeric = (loss_change(name, c, epsilon) - loss_change(name, c, -epsilon)) / (2.0 * epsilon)
            a = float(gflat[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
