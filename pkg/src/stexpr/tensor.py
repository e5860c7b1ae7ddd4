"""Dense tensors with a reverse-mode gradient tape.

Operations are recorded only while a :class:`Tape` is active and at least
one input requires gradients. Anything computed outside a tape is a plain
value, which is how stop-gradient branches are expressed::

    with Tape() as tape:
        loss = mean_all(relu(matmul(x, w)))
    tape.backward(loss)
    w.grad  # accumulated, caller zeroes between steps
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateError, DimensionError, NumericError

_ACTIVE: list["Tape"] = []


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Op:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out, inputs, backward):
        self.ops.append(_Op(out, inputs, backward))

    def backward(self, output, seed=None):
        """Propagate d(output) back to every recorded input.

        Leaf tensors accumulate into ``.grad``; intermediates receive a
        fresh ``.grad`` holding their total upstream gradient.
        """
        if seed is None:
            seed = np.ones_like(output.data)
        pending = {id(output): np.asarray(seed, dtype=output.data.dtype)}
        if output._leaf and output.requires_grad:
            output.grad += pending[id(output)]
        for op in reversed(self.ops):
            g = pending.pop(id(op.out), None)
            if g is None:
                continue
            op.out.grad = g
            for t, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t._leaf:
                    t.grad += gi
                else:
                    key = id(t)
                    pending[key] = pending[key] + gi if key in pending else gi


@contextmanager
def no_grad():
    """Suspend recording on every active tape."""
    saved = _ACTIVE[:]
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE[:] = saved


def _tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _tensor(a, like), _tensor(b, like)


def _emit(data, inputs, backward: Callable) -> Tensor:
    # a sum is non-finite whenever any entry is (or the total overflows)
    if not np.isfinite(np.add.reduce(data, axis=None)):
        raise NumericError("non-finite value produced")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = False
    tape = _ACTIVE[-1] if _ACTIVE else None
    out.requires_grad = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    if out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, name):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def scale(a, c: float):
    a = _tensor(a)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    a = _tensor(a)
    on = a.data > 0
    return _emit(np.where(on, a.data, 0.0).astype(a.dtype, copy=False), (a,), lambda g: (g * on,))


def log1p(a):
    a = _tensor(a)
    ad = a.data
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log1p(ad)
    return _emit(out, (a,), lambda g: (g / (1.0 + ad),))


def sqrt(a):
    a = _tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        return _emit(out, (a,), lambda g: (g * 0.5 / out,))


# -- reductions and reshaping ---------------------------------------------------


def sum_all(a):
    a = _tensor(a)
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a):
    a = _tensor(a)
    shape, n = a.shape, a.data.size
    return _emit(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def sum_axis(a, axis: int, keepdims=False):
    a = _tensor(a)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean_axis(a, axis: int, keepdims=False):
    a = _tensor(a)
    n = a.shape[axis]
    return scale(sum_axis(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = _tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat_cols(parts: Sequence[Tensor]):
    parts = [_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError("concat_cols needs 2-D inputs with equal row counts")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return _emit(
        np.concatenate([p.data for p in parts], axis=1),
        tuple(parts),
        lambda g: tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))),
    )


# -- linear algebra ------------------------------------------------------------------


def matmul(a, b):
    a, b = _tensor(a), _tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax_rows(x):
    """Row-wise softmax, stabilized by subtracting each row's max."""
    x = _tensor(x)
    if x.data.ndim != 2:
        raise DimensionError("softmax_rows expects a matrix")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def cosine_rows(a, b):
    """Cosine similarity of matching rows; returns a vector of length N."""
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise DimensionError(f"cosine_rows: shapes {a.shape} and {b.shape} differ")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateError("cosine of a zero-norm row")
    dot = (a.data * b.data).sum(axis=1)
    c = dot / (na * nb)
    ad, bd = a.data, b.data

    def back(g):
        g = g[:, None]
        da = g * (bd / (na * nb)[:, None] - c[:, None] * ad / (na**2)[:, None])
        db = g * (ad / (na * nb)[:, None] - c[:, None] * bd / (nb**2)[:, None])
        return da, db

    return _emit(c, (a, b), back)


# -- indexed / segment operations ----------------------------------------------


def _check_ids(ids, n, what="segment id"):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"{what} out of range [0, {n})")
    return ids


_SCATTER_CACHE: dict = {}
_SCATTER_CACHE_SIZE = 256


def _scatter_matrix(ids, n, dtype):
    key = (n, len(ids), np.dtype(dtype).str, ids.tobytes())
    m = _SCATTER_CACHE.get(key)
    if m is None:
        if len(_SCATTER_CACHE) >= _SCATTER_CACHE_SIZE:
            _SCATTER_CACHE.pop(next(iter(_SCATTER_CACHE)))
        m = sp.csr_matrix(
            (np.ones(len(ids), dtype=dtype), (ids, np.arange(len(ids)))),
            shape=(n, len(ids)),
        )
        _SCATTER_CACHE[key] = m
    return m


def scatter_add(values: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets given by ``ids`` (plain numpy)."""
    if values.ndim == 1:
        return np.bincount(ids, weights=values, minlength=n).astype(values.dtype, copy=False)
    return np.asarray(_scatter_matrix(ids, n, values.dtype) @ values)


def gather_rows(x, idx):
    x = _tensor(x)
    n = x.shape[0]
    idx = _check_ids(idx, n, "row index")
    return _emit(x.data[idx], (x,), lambda g: (scatter_add(g, idx, n),))


def segment_sum(values, segment_ids, n_segments: int):
    values = _tensor(values)
    ids = _check_ids(segment_ids, n_segments)
    if len(ids) != values.shape[0]:
        raise DimensionError("one segment id per row required")
    return _emit(scatter_add(values.data, ids, n_segments), (values,), lambda g: (g[ids],))


def segment_mean(values, segment_ids, n_segments: int):
    """Mean of the rows sharing a segment id; empty segments give zero rows."""
    values = _tensor(values)
    ids = _check_ids(segment_ids, n_segments)
    if len(ids) != values.shape[0]:
        raise DimensionError("one segment id per row required")
    counts = np.bincount(ids, minlength=n_segments).astype(values.dtype)
    inv = 1.0 / np.maximum(counts, 1.0)
    if values.data.ndim == 2:
        inv = inv[:, None]
    out = scatter_add(values.data, ids, n_segments) * inv
    return _emit(out, (values,), lambda g: ((g * inv)[ids],))


def segment_softmax(scores, segment_ids, n_segments: int):
    """Softmax of a score vector within each segment."""
    scores = _tensor(scores)
    if scores.data.ndim != 1:
        raise DimensionError("segment_softmax expects a vector of scores")
    ids = _check_ids(segment_ids, n_segments)
    s = scores.data
    top = np.full(n_segments, -np.inf, dtype=s.dtype)
    np.maximum.at(top, ids, s)
    e = np.exp(s - top[ids])
    y = e / scatter_add(e, ids, n_segments)[ids]

    def back(g):
        return (y * (g - scatter_add(g * y, ids, n_segments)[ids]),)

    return _emit(y, (scores,), back)


def neighbor_mean(x, edges, n_nodes: int):
    """Row i = mean of x[j] over edges (i, j); nodes without edges get zeros.

    Equivalent to ``segment_mean(gather_rows(x, edges[:, 1]), edges[:, 0], n)``
    but done as one sparse product.
    """
    x = _tensor(x)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    src = _check_ids(edges[:, 0], n_nodes)
    dst = _check_ids(edges[:, 1], x.shape[0], "neighbor index")
    key = ("mean", n_nodes, x.shape[0], x.dtype.str, edges.tobytes())
    pair = _SCATTER_CACHE.get(key)
    if pair is None:
        counts = np.bincount(src, minlength=n_nodes).astype(x.dtype)
        w = 1.0 / np.maximum(counts, 1.0)
        A = sp.csr_matrix((w[src], (src, dst)), shape=(n_nodes, x.shape[0]))
        if len(_SCATTER_CACHE) >= _SCATTER_CACHE_SIZE:
            _SCATTER_CACHE.pop(next(iter(_SCATTER_CACHE)))
        pair = _SCATTER_CACHE[key] = (A, A.T.tocsr())
    A, At = pair
    return _emit(np.asarray(A @ x.data), (x,), lambda g: (np.asarray(At @ g),))


def edge_dot(q, k, q_idx, k_idx):
    """Score per edge e: <q[q_idx[e]], k[k_idx[e]]>."""
    q, k = _tensor(q), _tensor(k)
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"edge_dot: widths {q.shape[1]} and {k.shape[1]} differ")
    qi = _check_ids(q_idx, q.shape[0], "query index")
    ki = _check_ids(k_idx, k.shape[0], "key index")
    qe, ke = q.data[qi], k.data[ki]
    nq, nk = q.shape[0], k.shape[0]

    def back(g):
        g = g[:, None]
        return scatter_add(g * ke, qi, nq), scatter_add(g * qe, ki, nk)

    return _emit(np.einsum("ij,ij->i", qe, ke), (q, k), back)


def edge_weighted_sum(w, v, q_idx, k_idx, n_query: int):
    """Row i = sum over edges e with q_idx[e] == i of w[e] * v[k_idx[e]]."""
    w, v = _tensor(w), _tensor(v)
    qi = _check_ids(q_idx, n_query, "query index")
    ki = _check_ids(k_idx, v.shape[0], "key index")
    if w.shape != (len(qi),):
        raise DimensionError("edge_weighted_sum: one weight per edge required")
    ve = v.data[ki]
    nv = v.shape[0]

    def back(g):
        ge = g[qi]
        return np.einsum("ij,ij->i", ge, ve), scatter_add(ge * w.data[:, None], ki, nv)

    return _emit(scatter_add(ve * w.data[:, None], qi, n_query), (w, v), back)


# -- gradient checking -------------------------------------------------------------


def grad_check(f: Callable, x, h: float = 1e-5, per_tensor: int | None = None, seed=0) -> float:
    """Max relative error between tape gradients and central differences.

    ``x`` is a tensor or a sequence of tensors; ``f(x)`` must return a scalar
    tensor. The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    With ``per_tensor`` set, only that many randomly chosen coordinates of
    each tensor are perturbed.
    """
    rng = np.random.default_rng(seed)
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        out = f(x)
    if out.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    tape.backward(out)
    worst = 0.0
    for t in xs:
        analytic = t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        picks = range(flat.size)
        if per_tensor is not None and per_tensor < flat.size:
            picks = np.sort(rng.choice(flat.size, per_tensor, replace=False))
        for i in picks:
            keep = flat[i]
            flat[i] = keep + h
            up = float(f(x).data)
            flat[i] = keep - h
            down = float(f(x).data)
            flat[i] = keep
            numeric = (up - down) / (2 * h)
            if not math.isfinite(numeric):
                raise NumericError("non-finite finite-difference estimate")
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
