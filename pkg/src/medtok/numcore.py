"""Dense float64 matrix kernels with reverse-mode differentiation.

Everything is a 2-D float64 array. Differentiable computations build a
graph of :class:`Node` objects on the fly; calling ``backward()`` on a
scalar node fills ``grad`` on every ancestor, after which the graph is
discarded. There is no persistent tape.

Reductions inherit numpy's fixed pairwise-summation order (and BLAS's
fixed blocking for matmul), so two evaluations on equal inputs are
bitwise identical on a given build. No op parallelizes internally.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

# Rows of a pairwise-distance query block processed per chunk; bounds the
# (rows x N x d) temporary without changing any per-entry summation order.
_SQDIST_CHUNK_ELEMS = 4_000_000


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 2-D array.

    1-D input becomes a single row. Raises DimensionError on wrong shape
    and NumericError on NaN/Inf entries.
    """
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape != (rows, cols):
        raise DimensionError(f"expected shape {(rows, cols)}, got {m.shape}")
    if not np.isfinite(m).all():
        raise NumericError("matrix contains NaN or Inf")
    return m


class Node:
    """One value in a differentiation graph.

    ``grad`` is populated by ``backward()`` and has the same shape as
    ``value``. A node with ``stop_gradient`` set has no parents and
    therefore propagates nothing upstream.
    """

    __slots__ = ("value", "grad", "parents", "stop_gradient", "_backward")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        stop_gradient: bool = False,
    ):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.stop_gradient = stop_gradient
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def backward(self) -> None:
        """Run reverse-mode accumulation from this 1x1 scalar node."""
        if self.value.shape != (1, 1):
            raise DimensionError(f"backward() needs a 1x1 scalar, got {self.value.shape}")
        order = _topo_order(self)
        for n in order:
            n.grad = None
        self.grad = np.ones((1, 1))
        for n in reversed(order):
            if n._backward is not None and n.grad is not None:
                n._backward(n.grad)
        # Leaves some ancestors at None only when every path is detached.
        for n in order:
            if n.grad is None:
                n.grad = np.zeros_like(n.value)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, stop_gradient={self.stop_gradient})"


def _topo_order(root: Node) -> list[Node]:
    """Nodes with every parent before its children (iterative post-order)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x) -> Node:
    return x if isinstance(x, Node) else Node(as_matrix(x))


def _acc(node: Node, fresh: np.ndarray) -> None:
    """Accumulate a gradient the caller exclusively owns."""
    if node.grad is None:
        node.grad = fresh
    else:
        node.grad += fresh


def _acc_shared(node: Node, shared: np.ndarray) -> None:
    """Accumulate a gradient that may alias another node's buffer."""
    if node.grad is None:
        node.grad = shared.copy()
    else:
        node.grad += shared


def _acc_bcast(node: Node, g: np.ndarray) -> None:
    """Accumulate a gradient that broadcasts up to the node's shape."""
    if node.grad is None:
        node.grad = np.broadcast_to(g, node.value.shape).copy()
    else:
        node.grad += g


def constant(x) -> Node:
    """Wrap a raw array as a graph node (validated at this boundary)."""
    return Node(as_matrix(x))


# Trainable leaves are ordinary nodes; the alias marks intent at call sites.
leaf = constant


def stop_grad(x) -> Node:
    """Detach: same forward value, zero gradient through this point."""
    x = _lift(x)
    return Node(x.value, (), None, stop_gradient=True)


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shapes differ ({a.value.shape} vs {b.value.shape})")


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _same_shape(a, b, "add")
    out = Node(a.value + b.value, (a, b))

    def bwd(g):
        _acc_shared(a, g)
        _acc_shared(b, g)

    out._backward = bwd
    return out


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _same_shape(a, b, "sub")
    out = Node(a.value - b.value, (a, b))

    def bwd(g):
        _acc_shared(a, g)
        _acc(b, -g)

    out._backward = bwd
    return out


def mul(a, b) -> Node:
    """Elementwise product of same-shape matrices."""
    a, b = _lift(a), _lift(b)
    _same_shape(a, b, "mul")
    out = Node(a.value * b.value, (a, b))

    def bwd(g):
        _acc(a, g * b.value)
        _acc(b, g * a.value)

    out._backward = bwd
    return out


def scale(a, s: float) -> Node:
    a = _lift(a)
    s = float(s)
    out = Node(a.value * s, (a,))

    def bwd(g):
        _acc(a, g * s)

    out._backward = bwd
    return out


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ ({a.value.shape} x {b.value.shape})"
        )
    out = Node(a.value @ b.value, (a, b))

    def bwd(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    out._backward = bwd
    return out


def transpose(a) -> Node:
    a = _lift(a)
    out = Node(np.ascontiguousarray(a.value.T), (a,))

    def bwd(g):
        _acc_shared(a, g.T)

    out._backward = bwd
    return out


def relu(a) -> Node:
    a = _lift(a)
    mask = a.value > 0.0
    out = Node(np.where(mask, a.value, 0.0), (a,))

    def bwd(g):
        _acc(a, g * mask)

    out._backward = bwd
    return out


def gather_rows(table, ids) -> Node:
    """Select rows by integer index; gradient scatter-adds back."""
    table = _lift(table)
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {table.value.shape[0]} rows")
    out = Node(table.value[idx], (table,))

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.value)
        np.add.at(table.grad, idx, g)

    out._backward = bwd
    return out


def vstack(parts: Sequence) -> Node:
    """Concatenate nodes along rows; gradient slices back to each part."""
    nodes = [_lift(p) for p in parts]
    if not nodes:
        raise DimensionError("vstack: empty sequence")
    cols = nodes[0].value.shape[1]
    for n in nodes:
        if n.value.shape[1] != cols:
            raise DimensionError("vstack: column counts differ")
    out = Node(np.concatenate([n.value for n in nodes], axis=0), tuple(nodes))
    offsets = np.cumsum([0] + [n.value.shape[0] for n in nodes])

    def bwd(g):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            _acc_shared(n, g[lo:hi])

    out._backward = bwd
    return out


def softmax_rows(m) -> Node:
    """Row-wise softmax with per-row max subtraction.

    -Inf logits are the valid zero-probability limit; NaN, +Inf, and
    all--Inf rows are rejected.
    """
    m = _lift(m)
    row_max = m.value.max(axis=1, keepdims=True)
    if np.isnan(m.value).any() or np.isposinf(row_max).any():
        raise NumericError("softmax input contains NaN or +Inf")
    if np.isneginf(row_max).any():
        raise NumericError("softmax row has no finite entry")
    z = m.value - row_max
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Node(s, (m,))

    def bwd(g):
        _acc(m, s * (g - (g * s).sum(axis=1, keepdims=True)))

    out._backward = bwd
    return out


def log_softmax_rows(m) -> Node:
    m = _lift(m)
    row_max = m.value.max(axis=1, keepdims=True)
    if np.isnan(m.value).any() or np.isposinf(row_max).any():
        raise NumericError("log-softmax input contains NaN or +Inf")
    if np.isneginf(row_max).any():
        raise NumericError("log-softmax row has no finite entry")
    z = m.value - row_max
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = Node(z - lse, (m,))
    soft = np.exp(z - lse)

    def bwd(g):
        _acc(m, g - soft * g.sum(axis=1, keepdims=True))

    out._backward = bwd
    return out


def sqdist_values(q_val: np.ndarray, c_val: np.ndarray) -> np.ndarray:
    """Raw squared-distance matrix; the value path of pairwise_sqdist."""
    if q_val.shape[1] != c_val.shape[1]:
        raise DimensionError(
            f"pairwise_sqdist: dimension mismatch ({q_val.shape} vs {c_val.shape})"
        )
    nq, d = q_val.shape
    n_rows = c_val.shape[0]
    out_val = np.empty((nq, n_rows))
    step = max(1, _SQDIST_CHUNK_ELEMS // max(1, n_rows * d))
    for lo in range(0, nq, step):
        diff = q_val[lo : lo + step, None, :] - c_val[None, :, :]
        out_val[lo : lo + step] = np.sum(diff * diff, axis=2)
    return out_val


def pairwise_sqdist(queries, codewords) -> Node:
    """Squared Euclidean distances: entry (i, j) = ||q_i - c_j||^2."""
    q, c = _lift(queries), _lift(codewords)
    out = Node(sqdist_values(q.value, c.value), (q, c))

    def bwd(g):
        _acc(q, 2.0 * (q.value * g.sum(axis=1, keepdims=True) - g @ c.value))
        _acc(c, 2.0 * (c.value * g.sum(axis=0).reshape(-1, 1) - g.T @ q.value))

    out._backward = bwd
    return out


def normalize_rows(m) -> Node:
    """Scale each row to unit L2 norm; zero rows are rejected."""
    m = _lift(m)
    norms = np.sqrt(np.sum(m.value * m.value, axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise NumericError("normalize_rows: zero-norm row")
    y = m.value / norms
    out = Node(y, (m,))

    def bwd(g):
        _acc(m, (g - y * (g * y).sum(axis=1, keepdims=True)) / norms)

    out._backward = bwd
    return out


def straight_through(quantized, passthrough) -> Node:
    """sg[q - p] + p without the float round-trip.

    Forward value is exactly ``quantized``'s; the gradient flows only to
    ``passthrough``, as the identity.
    """
    q, p = _lift(quantized), _lift(passthrough)
    _same_shape(q, p, "straight_through")
    out = Node(q.value, (p,))

    def bwd(g):
        _acc_shared(p, g)

    out._backward = bwd
    return out


def row_sum(m) -> Node:
    """Per-row total across columns, shape (rows, 1)."""
    m = _lift(m)
    out = Node(m.value.sum(axis=1, keepdims=True), (m,))

    def bwd(g):
        _acc_bcast(m, g)

    out._backward = bwd
    return out


def mean_rows(m) -> Node:
    """Average of the rows, shape (1, cols)."""
    m = _lift(m)
    n = m.value.shape[0]
    out = Node(m.value.mean(axis=0, keepdims=True), (m,))

    def bwd(g):
        _acc_bcast(m, g / n)

    out._backward = bwd
    return out


def sum_all(m) -> Node:
    m = _lift(m)
    out = Node(m.value.sum().reshape(1, 1), (m,))

    def bwd(g):
        _acc_bcast(m, g)

    out._backward = bwd
    return out


def mean_all(m) -> Node:
    m = _lift(m)
    size = m.value.size
    out = Node(m.value.mean().reshape(1, 1), (m,))

    def bwd(g):
        _acc_bcast(m, g / size)

    out._backward = bwd
    return out


def scalar(node: Node) -> float:
    """Extract the value of a 1x1 node as a Python float."""
    if node.value.shape != (1, 1):
        raise DimensionError(f"scalar() needs a 1x1 node, got {node.value.shape}")
    return float(node.value[0, 0])


def grad_check(f: Callable[[Node], Node], x, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a matrix node to a 1x1 scalar node and must be pure: it is
    re-evaluated at perturbed copies of ``x``. The per-entry error is
    |analytic - numeric| / (|numeric| + 1e-12).
    """
    x0 = as_matrix(x).copy()
    lx = Node(x0)
    out = f(lx)
    out.backward()
    # A fully stop-gradient path leaves the input outside the graph.
    analytic = np.zeros_like(x0) if lx.grad is None else lx.grad.copy()

    numeric = np.zeros_like(x0)
    for idx in np.ndindex(*x0.shape):
        xp = x0.copy()
        xp[idx] += eps
        xm = x0.copy()
        xm[idx] -= eps
        fp = scalar(f(Node(xp)))
        fm = scalar(f(Node(xm)))
        numeric[idx] = (fp - fm) / (2.0 * eps)

    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)
    return float(rel.max())
