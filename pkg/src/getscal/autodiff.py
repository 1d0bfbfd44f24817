"""A small define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the primitives needed by the GCN/MLP classifiers and the calibrators are
provided. Each op returns a new :class:`Tensor`; when any input requires a
gradient the output records its parents and a closure that maps the output
gradient to input gradients. :func:`backward` walks that record in reverse
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .graph import CsrMatrix


class ShapeError(ValueError):
    pass


class Tensor:
    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, parents=inputs, backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def _check_2d(name: str, *ts: Tensor):
    for t in ts:
        if t.data.ndim != 2:
            raise ShapeError(f"{name}: expected a matrix, got shape {t.shape}")


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), bw)


def spmm(adj: CsrMatrix, x: Tensor) -> Tensor:
    """Sparse (constant) times dense."""
    x = as_tensor(x)
    _check_2d("spmm", x)
    if adj.num_cols != x.shape[0]:
        raise ShapeError(f"spmm: shapes {adj.shape} and {x.shape} are incompatible")
    return _make(adj.matmul(x.data), (x,), lambda g: (adj.rmatmul_t(g),))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} differ")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add_row_bias(x: Tensor, bias: Tensor) -> Tensor:
    x, bias = as_tensor(x), as_tensor(bias)
    _check_2d("add_row_bias", x)
    if bias.shape not in ((x.shape[1],), (1, x.shape[1])):
        raise ShapeError(f"add_row_bias: bias shape {bias.shape} does not match {x.shape}")

    def bw(g):
        return g, g.sum(axis=0).reshape(bias.shape)

    return _make(x.data + bias.data.reshape(1, -1), (x, bias), bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def concat_columns(ts: Sequence[Tensor]) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    _check_2d("concat_columns", *ts)
    rows = {t.shape[0] for t in ts}
    if len(rows) != 1:
        raise ShapeError(f"concat_columns: row counts differ: {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def bw(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in ts], axis=1), ts, bw)


def column(x: Tensor, j: int) -> Tensor:
    """Column ``j`` of ``x`` as an (N, 1) tensor."""
    x = as_tensor(x)
    _check_2d("column", x)

    def bw(g):
        out = np.zeros_like(x.data)
        out[:, j] = g[:, 0]
        return (out,)

    return _make(x.data[:, j:j + 1], (x,), bw)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    table = as_tensor(table)
    _check_2d("embedding_lookup", table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding_lookup: indices must be a vector, got shape {idx.shape}")
    if len(idx) and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for table of {table.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the exact identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(np.float64)
    keep *= 1.0 / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def sparse_dropout(m: CsrMatrix, p: float, training: bool,
                   rng: np.random.Generator | None = None) -> CsrMatrix:
    """Inverted dropout of a constant sparse matrix.

    Only stored entries draw a mask; dropping an implicit zero changes
    nothing, so this has the same distribution as dense dropout of ``m``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return m
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = rng.random(m.nnz, dtype=np.float32) >= p
    vals = np.where(keep, m.values * (1.0 / (1.0 - p)), 0.0)
    return CsrMatrix(m.num_rows, m.num_cols, m.row_offsets, m.col_indices, vals)


def row_block(w: Tensor, lo: int, hi: int) -> Tensor:
    """Rows ``lo:hi`` of a matrix; the gradient is scattered back into place."""
    w = as_tensor(w)
    _check_2d("row_block", w)
    if not 0 <= lo <= hi <= w.shape[0]:
        raise ShapeError(f"row_block: rows {lo}:{hi} out of range for shape {w.shape}")

    def bw(g):
        out = np.zeros_like(w.data)
        out[lo:hi] = g
        return (out,)

    return _make(w.data[lo:hi], (w,), bw)


def _check_rowwise(name: str, m: Tensor, s: Tensor):
    _check_2d(name, m, s)
    if s.shape[1] != 1 or s.shape[0] not in (1, m.shape[0]):
        raise ShapeError(f"{name}: per-row scalar of shape {s.shape} does not fit matrix {m.shape}")


def rowwise_divide(m: Tensor, s: Tensor) -> Tensor:
    """``m[i] / s[i]`` for a positive column ``s`` of shape (N, 1) or (1, 1)."""
    m, s = as_tensor(m), as_tensor(s)
    _check_rowwise("rowwise_divide", m, s)
    if np.any(s.data <= 0):
        raise ValueError("rowwise_divide: divisors must be positive")
    out = m.data / s.data

    def bw(g):
        gs = -(g * out).sum(axis=1, keepdims=True) / s.data if s.requires_grad else None
        return g / s.data, (_unbroadcast(gs, s.shape) if gs is not None else None)

    return _make(out, (m, s), bw)


def rowwise_scale(m: Tensor, s: Tensor) -> Tensor:
    """``m[i] * s[i]`` for a column ``s`` of shape (N, 1) or (1, 1)."""
    m, s = as_tensor(m), as_tensor(s)
    _check_rowwise("rowwise_scale", m, s)

    def bw(g):
        gs = (g * m.data).sum(axis=1, keepdims=True) if s.requires_grad else None
        return g * s.data, (_unbroadcast(gs, s.shape) if gs is not None else None)

    return _make(m.data * s.data, (m, s), bw)


def elementwise_mul_add(z: Tensor, t: Tensor, b: Tensor) -> Tensor:
    """``z * t + b`` with ``t`` and ``b`` broadcast over rows."""
    z, t, b = as_tensor(z), as_tensor(t), as_tensor(b)
    _check_2d("elementwise_mul_add", z)
    k = z.shape[1]
    for name, v in (("t", t), ("b", b)):
        if v.shape not in ((k,), (1, k)):
            raise ShapeError(f"elementwise_mul_add: {name} shape {v.shape} does not match {z.shape}")
    tr = t.data.reshape(1, k)

    def bw(g):
        return (g * tr, (g * z.data).sum(axis=0).reshape(t.shape), g.sum(axis=0).reshape(b.shape))

    return _make(z.data * tr + b.data.reshape(1, k), (z, t, b), bw)


def expand_rows(s: Tensor, n: int) -> Tensor:
    """Repeat a (1, C) tensor into (n, C)."""
    s = as_tensor(s)
    if s.data.ndim != 2 or s.shape[0] != 1:
        raise ShapeError(f"expand_rows: expected a (1, C) tensor, got {s.shape}")
    return _make(np.repeat(s.data, n, axis=0), (s,), lambda g: (g.sum(axis=0, keepdims=True),))


def softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_2d("softmax_rows", x)
    out = _softmax(x.data)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), bw)


def topk_softmax(q: Tensor, k: int) -> Tensor:
    """Softmax over the ``k`` largest entries of each row; the rest are exactly 0.

    Ties go to the lower column index.
    """
    q = as_tensor(q)
    _check_2d("topk_softmax", q)
    m = q.shape[1]
    if not 1 <= k <= m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    keep = topk_mask(q.data, k)
    masked = np.where(keep, q.data, -np.inf)
    out = _softmax(masked)
    out[~keep] = 0.0

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (q,), bw)


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    keep = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=1)
    return keep


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    x = as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data + c, (x,), lambda g: (g,))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row softmax of a plain array (no tape)."""
    return _softmax(np.asarray(z, dtype=np.float64))


def _mask_indices(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise ShapeError(f"boolean mask of shape {mask.shape} does not match {n} rows")
        idx = np.flatnonzero(mask)
    else:
        idx = mask.astype(np.int64).reshape(-1)
    if len(idx) == 0:
        raise ValueError("mask selects no nodes")
    return idx


def log_softmax_nll(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean of ``-log softmax(logits)[y]`` over the masked rows."""
    logits = as_tensor(logits)
    _check_2d("log_softmax_nll", logits)
    n = logits.shape[0]
    idx = _mask_indices(np.ones(n, dtype=bool) if mask is None else mask, n)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape == (n,):
        y = y[idx]
    elif y.shape != idx.shape:
        raise ShapeError(f"labels of shape {y.shape} match neither all rows nor the mask")
    z = logits.data[idx]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(lse - shifted[np.arange(len(idx)), y])

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(len(idx)), y] -= 1.0
        out = np.zeros_like(logits.data)
        out[idx] = p * (float(g) / len(idx))
        return (out,)

    return _make(np.array(loss), (logits,), bw)


def nll_of_probs(probs: Tensor, labels, mask=None) -> Tensor:
    """Mean of ``-log probs[y]`` over the masked rows, for already-normalized rows."""
    probs = as_tensor(probs)
    _check_2d("nll_of_probs", probs)
    n = probs.shape[0]
    idx = _mask_indices(np.ones(n, dtype=bool) if mask is None else mask, n)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape == (n,):
        y = y[idx]
    picked = np.maximum(probs.data[idx, y], 1e-300)

    def bw(g):
        out = np.zeros_like(probs.data)
        out[idx, y] = -float(g) / (len(idx) * picked)
        return (out,)

    return _make(np.array(-np.mean(np.log(picked))), (probs,), bw)


# ------------------------------------------------------------------ backward

def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ----------------------------------------------------------------- optimizer

@dataclass
class Adam:
    """Adam with decoupled weight decay applied before the moment update."""

    params: list[Parameter]
    lr: float = 1e-2
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("a parameter may appear only once in an optimizer")
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(opt: Adam) -> None:
    opt.step()


# -------------------------------------------------------------- grad checker

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_param: str
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                      step: float = 1e-6, tolerance: float = 1e-4,
                      floor: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    With ``step=1e-6`` a central difference carries roundoff of roughly
    ``1e-16 * |f| / step``, i.e. ~1e-9 for an O(1) loss, so gradients much
    smaller than ``floor`` are judged on absolute error ``tolerance * floor``
    instead of on a ratio dominated by that noise.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = []
    worst, worst_name = 0.0, ""
    for p, a in zip(params, analytic):
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn().item()
            flat[i] = orig - step
            fm = loss_fn().item()
            flat[i] = orig
            num.reshape(-1)[i] = (fp - fm) / (2.0 * step)
        numeric.append(num)
        err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        if err.size and err.max() > worst:
            worst, worst_name = float(err.max()), getattr(p, "name", "")
    for p in params:
        p.grad = None
    return GradCheckReport(worst, worst <= tolerance, worst_name, analytic, numeric)
