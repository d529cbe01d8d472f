"""Small define-then-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` is built once from a closed set of operations (affine map,
tanh, relu, masked softmax, cross-entropy, concatenation, weighted sum) and
then evaluated many times with different bound inputs. Parameter leaves are
declared with :meth:`Graph.param`; their declaration order is the canonical
layout of every :class:`GradientVector` the graph produces.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


@dataclass(frozen=True)
class ParamBlock:
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True)
class ParamLayout:
    blocks: Tuple[ParamBlock, ...]

    @classmethod
    def from_shapes(cls, shapes: Iterable[Tuple[str, Tuple[int, ...]]]) -> "ParamLayout":
        blocks = []
        offset = 0
        for name, shape in shapes:
            block = ParamBlock(name, offset, tuple(int(s) for s in shape))
            blocks.append(block)
            offset += block.size
        return cls(tuple(blocks))

    @property
    def size(self) -> int:
        if not self.blocks:
            return 0
        last = self.blocks[-1]
        return last.offset + last.size

    @property
    def names(self) -> List[str]:
        return [b.name for b in self.blocks]

    def __getitem__(self, name: str) -> ParamBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def split(self, flat: np.ndarray) -> Dict[str, np.ndarray]:
        """Views of ``flat`` reshaped per block (no copies)."""
        if flat.shape != (self.size,):
            raise ShapeError(f"flat vector has shape {flat.shape}, layout needs ({self.size},)")
        return {b.name: flat[b.offset:b.offset + b.size].reshape(b.shape) for b in self.blocks}

    def flatten(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size, dtype=np.float64)
        for b in self.blocks:
            a = np.asarray(arrays[b.name], dtype=np.float64)
            if a.shape != b.shape:
                raise ShapeError(f"parameter {b.name!r} has shape {a.shape}, expected {b.shape}")
            out[b.offset:b.offset + b.size] = a.reshape(-1)
        return out


@dataclass
class GradientVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        if self.values.shape != (self.layout.size,):
            raise ShapeError("gradient length does not match layout")

    def block(self, name: str) -> np.ndarray:
        b = self.layout[name]
        return self.values[b.offset:b.offset + b.size].reshape(b.shape)

    def dot(self, other: "GradientVector") -> float:
        return float(self.values @ other.values)


class Node:
    __slots__ = ("id", "op", "inputs", "name", "value", "needs_grad", "attrs")

    def __init__(self, id: int, op: str, inputs: Tuple["Node", ...], name: Optional[str] = None, **attrs):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.name = name
        self.value: Optional[np.ndarray] = None
        self.needs_grad = op == "param" or any(i.needs_grad for i in inputs)
        self.attrs = attrs

    def label(self) -> str:
        return f"{self.op}#{self.id}" + (f"({self.name})" if self.name else "")

    def __repr__(self):
        return f"Node<{self.label()}>"


class Graph:
    """A static computation graph.

    Nodes are appended in construction order, which is therefore a valid
    topological order. Inputs and parameters are both bound by name at
    :meth:`forward` time; only parameters receive gradients.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.inputs: Dict[str, Node] = {}
        self.params: Dict[str, Node] = {}
        self.param_shapes: Dict[str, Tuple[int, ...]] = {}
        self.outputs: Dict[str, Node] = {}
        self.loss: Optional[Node] = None
        self._evaluated = False
        self._layout: Optional[ParamLayout] = None

    # -- construction -------------------------------------------------------

    def _add(self, op: str, inputs: Sequence[Node], name: Optional[str] = None, **attrs) -> Node:
        for i in inputs:
            if not isinstance(i, Node) or i.id >= len(self.nodes) or self.nodes[i.id] is not i:
                raise AutodiffError(f"{op}: input {i!r} does not belong to this graph")
        node = Node(len(self.nodes), op, tuple(inputs), name, **attrs)
        self.nodes.append(node)
        return node

    def input(self, name: str) -> Node:
        if name in self.inputs or name in self.params:
            raise AutodiffError(f"duplicate leaf name {name!r}")
        node = self._add("input", (), name)
        self.inputs[name] = node
        return node

    def param(self, name: str, shape: Sequence[int]) -> Node:
        if name in self.inputs or name in self.params:
            raise AutodiffError(f"duplicate leaf name {name!r}")
        node = self._add("param", (), name)
        self.params[name] = node
        self.param_shapes[name] = tuple(int(s) for s in shape)
        self._layout = None
        return node

    def affine(self, x: Node, weight: Node, bias: Optional[Node] = None, name: Optional[str] = None) -> Node:
        """``x @ weight (+ bias)``; x is a vector or a row-stacked matrix."""
        inputs = (x, weight) if bias is None else (x, weight, bias)
        return self._add("affine", inputs, name)

    def tanh(self, x: Node, name: Optional[str] = None) -> Node:
        return self._add("tanh", (x,), name)

    def relu(self, x: Node, name: Optional[str] = None) -> Node:
        return self._add("relu", (x,), name)

    def masked_softmax(self, scores: Node, mask: Optional[Node] = None, name: Optional[str] = None) -> Node:
        """Softmax over a vector; entries with mask == 0 get an additive -inf."""
        inputs = (scores,) if mask is None else (scores, mask)
        return self._add("masked_softmax", inputs, name)

    def cross_entropy(self, logits: Node, target: Node, name: Optional[str] = None) -> Node:
        """``logsumexp(logits) - target . logits`` for a (one-hot) target vector."""
        return self._add("cross_entropy", (logits, target), name)

    def concat(self, *xs: Node, name: Optional[str] = None) -> Node:
        if not xs:
            raise AutodiffError("concat needs at least one input")
        return self._add("concat", xs, name)

    def weighted_sum(self, weights: Node, rows: Node, name: Optional[str] = None) -> Node:
        """``sum_i weights[i] * rows[i]``."""
        return self._add("weighted_sum", (weights, rows), name)

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node
        return node

    def set_loss(self, node: Node) -> Node:
        self.loss = node
        return node

    @property
    def layout(self) -> ParamLayout:
        if self._layout is None:
            self._layout = ParamLayout.from_shapes(self.param_shapes.items())
        return self._layout

    # -- evaluation ---------------------------------------------------------

    def forward(self, inputs: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        for name, node in list(self.inputs.items()) + list(self.params.items()):
            if name not in inputs:
                raise AutodiffError(f"unbound graph input {name!r}")
            value = np.asarray(inputs[name], dtype=np.float64)
            if node.op == "param" and value.shape != self.param_shapes[name]:
                raise ShapeError(
                    f"{node.label()}: bound shape {value.shape} != declared {self.param_shapes[name]}")
            node.value = value
        self._evaluated = False
        for node in self.nodes:
            if node.op in ("input", "param"):
                continue
            node.value = _FORWARD[node.op](node, *[i.value for i in node.inputs])
            if not np.all(np.isfinite(node.value)):
                raise NonFiniteError(f"{node.label()}: non-finite value produced")
        self._evaluated = True
        return {name: node.value for name, node in self.outputs.items()}

    def backward(self, loss: Optional[Node] = None) -> GradientVector:
        loss = self.loss if loss is None else loss
        if loss is None:
            raise AutodiffError("no loss node given and none designated")
        if not self._evaluated:
            raise AutodiffError("forward has not been evaluated")
        if loss.value.shape != ():
            raise AutodiffError(f"{loss.label()}: loss must be scalar, got shape {loss.value.shape}")
        adj: Dict[int, np.ndarray] = {loss.id: np.ones(())}
        for node in reversed(self.nodes[:loss.id + 1]):
            g = adj.pop(node.id, None) if node.op != "param" else adj.get(node.id)
            if g is None or node.op in ("input", "param") or not node.needs_grad:
                continue
            grads = _BACKWARD[node.op](node, g, *[i.value for i in node.inputs])
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.needs_grad:
                    continue
                if inp.id in adj:
                    adj[inp.id] = adj[inp.id] + gi
                else:
                    adj[inp.id] = gi
        layout = self.layout
        flat = np.zeros(layout.size, dtype=np.float64)
        for b in layout.blocks:
            g = adj.get(self.params[b.name].id)
            if g is not None:
                flat[b.offset:b.offset + b.size] = np.reshape(g, -1)
        return GradientVector(flat, layout)


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return graph.forward(inputs)


def backward(graph: Graph, loss_node: Optional[Node] = None) -> GradientVector:
    return graph.backward(loss_node)


# -- op kernels ---------------------------------------------------------------


def _fwd_affine(node, x, w, b=None):
    if x.ndim not in (1, 2) or w.ndim not in (1, 2) or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"{node.label()}: cannot apply weight {w.shape} to input {x.shape}")
    y = x @ w
    if b is not None:
        if b.shape != w.shape[1:]:
            raise ShapeError(f"{node.label()}: bias {b.shape} does not match weight {w.shape}")
        y = y + b
    return y


def _bwd_affine(node, g, x, w, b=None):
    gx = g @ w.T if w.ndim == 2 else np.multiply.outer(g, w)
    if x.ndim == 1:
        gw = np.multiply.outer(x, g)
    else:
        gw = x.T @ g
    gb = None
    if b is not None:
        gb = g if x.ndim == 1 else g.sum(axis=0)
    return gx, gw, gb


def _fwd_masked_softmax(node, s, mask=None):
    if s.ndim != 1:
        raise ShapeError(f"{node.label()}: softmax expects a vector, got {s.shape}")
    if mask is None:
        z = s - s.max()
        e = np.exp(z)
        return e / e.sum()
    if mask.shape != s.shape:
        raise ShapeError(f"{node.label()}: mask {mask.shape} does not match scores {s.shape}")
    present = mask > 0
    if not present.any():
        raise AutodiffError(f"{node.label()}: empty bag (every entry masked)")
    z = np.where(present, s, -np.inf)
    e = np.exp(z - z[present].max())
    return e / e.sum()


def _bwd_masked_softmax(node, g, s, mask=None):
    a = node.value
    return a * (g - a @ g), None


def _fwd_cross_entropy(node, logits, target):
    if logits.ndim != 1 or target.shape != logits.shape:
        raise ShapeError(f"{node.label()}: logits {logits.shape} vs target {target.shape}")
    mx = logits.max()
    lse = mx + np.log(np.exp(logits - mx).sum())
    return np.asarray(lse * target.sum() - target @ logits)


def _bwd_cross_entropy(node, g, logits, target):
    e = np.exp(logits - logits.max())
    p = e / e.sum()
    return g * (p * target.sum() - target), None


def _fwd_concat(node, *xs):
    try:
        return np.concatenate([np.atleast_1d(x) for x in xs], axis=0)
    except ValueError as exc:
        raise ShapeError(f"{node.label()}: {exc}") from None


def _bwd_concat(node, g, *xs):
    out = []
    start = 0
    for x in xs:
        n = np.atleast_1d(x).shape[0]
        out.append(g[start:start + n].reshape(x.shape))
        start += n
    return out


def _fwd_weighted_sum(node, w, rows):
    if w.ndim != 1 or rows.shape[:1] != w.shape:
        raise ShapeError(f"{node.label()}: weights {w.shape} vs rows {rows.shape}")
    return np.tensordot(w, rows, axes=1)


def _bwd_weighted_sum(node, g, w, rows):
    gw = rows.reshape(rows.shape[0], -1) @ np.reshape(g, -1)
    grows = np.multiply.outer(w, g)
    return gw, grows


_FORWARD = {
    "affine": _fwd_affine,
    "tanh": lambda node, x: np.tanh(x),
    "relu": lambda node, x: np.maximum(x, 0.0),
    "masked_softmax": _fwd_masked_softmax,
    "cross_entropy": _fwd_cross_entropy,
    "concat": _fwd_concat,
    "weighted_sum": _fwd_weighted_sum,
}

_BACKWARD = {
    "affine": _bwd_affine,
    "tanh": lambda node, g, x: (g * (1.0 - node.value * node.value),),
    "relu": lambda node, g, x: (g * (x > 0),),
    "masked_softmax": _bwd_masked_softmax,
    "cross_entropy": _bwd_cross_entropy,
    "concat": _bwd_concat,
    "weighted_sum": _bwd_weighted_sum,
}


# -- gradient checking --------------------------------------------------------


@dataclass
class FiniteDiffReport:
    errors: Dict[str, float]
    step: float

    @property
    def worst_block(self) -> str:
        return max(self.errors, key=lambda k: (self.errors[k], k)) if self.errors else ""

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def finite_diff_check(graph: Graph, inputs: Mapping[str, np.ndarray], step: float,
                      loss: Optional[Node] = None) -> FiniteDiffReport:
    """Compare backward() against central differences, block by block."""
    if not step > 0:
        raise ValueError("step must be positive")
    loss = graph.loss if loss is None else loss
    bound = {k: np.array(v, dtype=np.float64, copy=True) for k, v in inputs.items()}
    graph.forward(bound)
    analytic = graph.backward(loss)

    def f():
        graph.forward(bound)
        return float(loss.value)

    errors = {}
    for b in graph.layout.blocks:
        p = bound[b.name].reshape(-1)
        numeric = np.empty(b.size)
        for i in range(b.size):
            orig = p[i]
            p[i] = orig + step
            fp = f()
            p[i] = orig - step
            fm = f()
            p[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
        errors[b.name] = relative_error(analytic.block(b.name).reshape(-1), numeric)
    graph.forward(bound)
    return FiniteDiffReport(errors, step)
