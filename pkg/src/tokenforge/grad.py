"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every operation on a :class:`Tensor` that has a differentiable input appends a
node to the graph. Nodes receive monotonically increasing ids, so sorting the
nodes reachable from a loss by id gives a valid topological order; ``backward``
walks them in reverse and visits each exactly once.

Only the handful of operations needed by the denoiser, classifier and token
optimizer are provided. Broadcasting is limited to row-bias addition.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

_node_ids = itertools.count()

ArrayLike = Union[np.ndarray, Sequence[float], float]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and the vector-Jacobian product."""

    id: int
    kind: str
    inputs: Tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Dense float64 array, optionally tracked for differentiation.

    Tensors compare by identity, which lets them key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "node", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Small conveniences; everything routes through the module-level ops.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)


def _as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(next(_node_ids), kind, tuple(inputs), vjp)
    return out


def tensor_from(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"dimensions must be positive, got {shape}")
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"{values.size} values do not fill shape {shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("tensor values must be finite")
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _record("matmul", A @ B, (a, b), vjp)


def add_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Add the vector ``b`` to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"row-bias add of {a.shape} and {b.shape}")

    def vjp(g):
        return g, g.sum(axis=0)

    return _record("add_broadcast", a.data + b.data, (a, b), vjp)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} of {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: ArrayLike) -> Tensor:
    """Multiply by a constant (scalar, or array broadcastable onto ``a``)."""
    a = _as_tensor(a)
    c = np.asarray(c, dtype=np.float64)
    out = a.data * c
    if out.shape != a.shape:
        raise ShapeError(f"scale of {a.shape} by constant of shape {c.shape}")
    return _record("scale", out, (a,), lambda g: (g * c,))


def affine_const(a: Tensor, mul: ArrayLike, shift: ArrayLike) -> Tensor:
    """``(a + shift) * mul`` with constant per-column ``mul`` and ``shift``."""
    a = _as_tensor(a)
    mul = np.asarray(mul, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    out = (a.data + shift) * mul
    if out.shape != a.shape:
        raise ShapeError(f"affine of {a.shape} with constants {mul.shape}, {shift.shape}")
    return _record("affine_const", out, (a,), lambda g: (g * mul,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    s = _sigmoid(X)

    def vjp(g):
        return (g * s * (1.0 + X * (1.0 - s)),)

    return _record("silu", X * s, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def concat_features(parts: Sequence[Tensor]) -> Tensor:
    """Horizontally concatenate ``[m, n_i]`` tensors into ``[m, sum n_i]``."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    m = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != m:
            raise ShapeError(f"concat part of shape {p.shape}, expected {m} rows")
    bounds = np.cumsum([p.shape[1] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=1))

    return _record("concat", np.concatenate([p.data for p in parts], axis=1), parts, vjp)


def repeat_rows(v: Tensor, m: int) -> Tensor:
    """Tile the vector ``v`` into ``m`` identical rows."""
    v = _as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeError(f"repeat_rows expects a vector, got {v.shape}")
    return _record("repeat_rows", np.tile(v.data, (m, 1)), (v,), lambda g: (g.sum(axis=0),))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _record("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_sq_err(pred: Tensor, target: Union[Tensor, ArrayLike]) -> Tensor:
    """Mean over all entries of ``(pred - target)**2``."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _same_shape(pred, target, "mean_sq_err")
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        d = (2.0 * float(g) / n) * diff
        return d, -d

    return _record("mse", np.array(np.mean(diff * diff)), (pred, target), vjp)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Cross-entropy of softmax(logits) against integer class targets.

    ``logits`` is ``[K]`` with a scalar target, or ``[m, K]`` with ``m``
    targets; the batched form returns the mean over rows.
    """
    logits = _as_tensor(logits)
    single = logits.data.ndim == 1
    L = logits.data[None, :] if single else logits.data
    if L.ndim != 2:
        raise ShapeError(f"logits must be [K] or [m, K], got {logits.shape}")
    m, K = L.shape
    tgt = np.atleast_1d(np.asarray(target))
    if tgt.shape != (m,) or not np.issubdtype(tgt.dtype, np.integer):
        raise ValueError(f"need {m} integer targets, got {target!r}")
    if np.any(tgt < 0) or np.any(tgt >= K):
        raise ValueError(f"target out of range for {K} classes: {target!r}")
    shifted = L - L.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(m)
    loss = np.mean(lse - shifted[rows, tgt])
    probs = np.exp(shifted - lse[:, None])

    def vjp(g):
        d = probs.copy()
        d[rows, tgt] -= 1.0
        d *= float(g) / m
        return (d[0] if single else d,)

    return _record("softmax_ce", np.array(loss), (logits,), vjp)


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every reachable leaf.

    Leaves that were created with ``requires_grad=True`` but do not feed the
    loss are absent from the returned map.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if loss.node is None:
        return {loss: np.ones_like(loss.data)}

    nodes: Dict[int, Node] = {}
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if node.id in nodes:
            continue
        nodes[node.id] = node
        for t in node.inputs:
            if t.node is not None and t.node.id not in nodes:
                stack.append(t.node)

    # gradients flowing into each node's output, keyed by node id
    pending: Dict[int, np.ndarray] = {loss.node.id: np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for nid in sorted(nodes, reverse=True):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        for t, gi in zip(node.inputs, node.vjp(g)):
            if not t.requires_grad or gi is None:
                continue
            if t.node is None:
                leaves[t] = leaves[t] + gi if t in leaves else np.array(gi, dtype=np.float64)
            else:
                key = t.node.id
                pending[key] = pending[key] + gi if key in pending else np.array(gi, dtype=np.float64)
    return leaves


# --- gradient utilities ---------------------------------------------------

GradMap = Mapping[object, np.ndarray]


def global_norm(grads: GradMap) -> float:
    total = 0.0
    for key in grads:
        g = grads[key]
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_global_norm(grads: GradMap, max_norm: float) -> dict:
    """Rescale all gradients jointly so their combined L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return {k: g.copy() for k, g in grads.items()}
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


@dataclass
class AdamState:
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.

    Parameters without an entry in ``grads`` are treated as having zero
    gradient. Returns new parameter arrays; ``state`` is updated in place and
    also returned.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.first_moment.get(name, np.zeros_like(p))
        v = state.second_moment.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out, state
