"""Minimal dense 2-D tensor engine with reverse-mode autodiff.

Everything is float32 and strictly rank 2; scalars are (1, 1) tensors.
Gradients are recorded on a define-by-run tape that is rebuilt every
forward pass, which keeps stochastic graph rewiring (dropout, protection
masks) trivially correct.  Broadcasting is limited to row vectors (1, F)
and column vectors (N, 1) against (N, F).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ContractError, IndexRangeError, ShapeError

Array = np.ndarray


def _as_f32_2d(data) -> Array:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim > 2:
        raise ShapeError(f"tensors are rank <= 2, got shape {arr.shape}")
    return np.atleast_2d(arr)


class Tensor:
    """A float32 matrix with an optional gradient buffer and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = _as_f32_2d(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: Array):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Operations append themselves in execution order, so the list is
    topologically sorted by construction; `backward` replays it exactly
    once in reverse.
    """

    _active: Optional["Tape"] = None

    def __init__(self):
        self.entries: list[tuple[Tensor, Callable[[Array], None]]] = []
        self._next_id = 0

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise ContractError("nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    def record(self, out: Tensor, backward: Callable[[Array], None]):
        out.requires_grad = True
        out.node_id = self._next_id
        self._next_id += 1
        self.entries.append((out, backward))

    def backward(self, loss: Tensor):
        """Populate .grad on every requires_grad tensor reachable from loss."""
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None:
            raise ContractError("loss tensor was not produced on this tape")
        loss.accumulate(np.ones_like(loss.data))
        for out, bw in reversed(self.entries):
            if out.grad is not None:
                bw(out.grad)


def _recording(*tensors: Tensor) -> bool:
    return Tape._active is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


def _record(out: Tensor, backward: Callable[[Array], None]):
    Tape._active.record(out, backward)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    if _recording(a, b):
        def bw(g: Array):
            if a.requires_grad:
                a.accumulate(g @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ g)
        _record(out, bw)
    return out


def _bcast_shapes_ok(x: tuple, y: tuple) -> bool:
    # same shape, row vector against matrix, or column vector against matrix
    if x == y:
        return True
    for a, b in ((x, y), (y, x)):
        if a == (1, 1):
            return True
        if a == (1, b[1]) or a == (b[0], 1):
            return True
    return False


def _unbroadcast(g: Array, shape: tuple) -> Array:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out.astype(np.float32)


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _bcast_shapes_ok(a.data.shape, b.data.shape):
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)
    if _recording(a, b):
        def bw(g: Array):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g, b.data.shape))
        _record(out, bw)
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a python float or a Tensor."""
    if not isinstance(b, Tensor):
        scale = float(b)
        out = Tensor(a.data * np.float32(scale))
        if _recording(a):
            def bw_s(g: Array):
                a.accumulate(g * np.float32(scale))
            _record(out, bw_s)
        return out
    if not _bcast_shapes_ok(a.data.shape, b.data.shape):
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)
    if _recording(a, b):
        def bw(g: Array):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g * a.data, b.data.shape))
        _record(out, bw)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if _recording(x):
        keep = x.data > 0
        def bw(g: Array):
            x.accumulate(g * keep)
        _record(out, bw)
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    s = np.float32(slope)
    out = Tensor(np.where(x.data > 0, x.data, x.data * s))
    if _recording(x):
        pos = x.data > 0
        def bw(g: Array):
            x.accumulate(np.where(pos, g, g * s))
        _record(out, bw)
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: retained entries scaled by 1/(1-p). Call only when training."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ShapeError("dropout probability must be < 1")
    keep = (rng.random(x.data.shape) >= p).astype(np.float32) / np.float32(1.0 - p)
    return mul(x, constant(keep))


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    rows = parts[0].data.shape[0]
    if any(p.data.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols needs equal row counts")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    if _recording(*parts):
        widths = [p.data.shape[1] for p in parts]
        def bw(g: Array):
            off = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    p.accumulate(g[:, off:off + w])
                off += w
        _record(out, bw)
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[:, start:stop])
    if _recording(x):
        def bw(g: Array):
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            x.accumulate(full)
        _record(out, bw)
    return out


def repeat_cols(x: Tensor, k: int) -> Tensor:
    """Repeat each column k times: (N, H) -> (N, H*k)."""
    out = Tensor(np.repeat(x.data, k, axis=1))
    if _recording(x):
        n, h = x.data.shape
        def bw(g: Array):
            x.accumulate(g.reshape(n, h, k).sum(axis=2))
        _record(out, bw)
    return out


def row_sum(x: Tensor) -> Tensor:
    """Sum across columns: (N, F) -> (N, 1)."""
    out = Tensor(x.data.sum(axis=1, keepdims=True))
    if _recording(x):
        def bw(g: Array):
            x.accumulate(np.broadcast_to(g, x.data.shape).astype(np.float32))
        _record(out, bw)
    return out


def mean_all(x: Tensor) -> Tensor:
    """Mean over all entries: (N, F) -> (1, 1) scalar."""
    n = x.data.size
    out = Tensor(x.data.sum(dtype=np.float32) / np.float32(n))
    if _recording(x):
        def bw(g: Array):
            x.accumulate(np.full_like(x.data, g.reshape(-1)[0] / np.float32(n)))
        _record(out, bw)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(dtype=np.float32))
    if _recording(x):
        def bw(g: Array):
            x.accumulate(np.full_like(x.data, g.reshape(-1)[0]))
        _record(out, bw)
    return out


def _check_index(index: Array, bound: int, what: str):
    if index.size and (index.min() < 0 or index.max() >= bound):
        raise IndexRangeError(f"{what} index outside [0, {bound})")


def gather(src: Tensor, index: Array) -> Tensor:
    """Select rows: out[e] = src[index[e]]."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    _check_index(index, src.data.shape[0], "gather")
    out = Tensor(src.data[index])
    if _recording(src):
        def bw(g: Array):
            acc = np.zeros_like(src.data)
            np.add.at(acc, index, g)
            src.accumulate(acc)
        _record(out, bw)
    return out


def _segment_sum(values: Array, index: Array, dim_size: int) -> Array:
    """Deterministic row-wise segment sum; fast path when index is sorted."""
    out = np.zeros((dim_size, values.shape[1]), dtype=np.float32)
    if index.size == 0:
        return out
    if index.size > 1 and np.all(index[1:] >= index[:-1]):
        boundaries = np.flatnonzero(np.diff(index)) + 1
        starts = np.concatenate(([0], boundaries))
        sums = np.add.reduceat(values, starts, axis=0)
        out[index[starts]] = sums
    else:
        np.add.at(out, index, values)
    return out


def scatter_add(src: Tensor, index: Array, dim_size: int) -> Tensor:
    """out[i] = sum of src rows e with index[e] == i; absent rows are zero."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size != src.data.shape[0]:
        raise ShapeError("scatter_add index length must match src rows")
    _check_index(index, dim_size, "scatter_add")
    out = Tensor(_segment_sum(src.data, index, dim_size))
    if _recording(src):
        def bw(g: Array):
            src.accumulate(g[index])
        _record(out, bw)
    return out


def segment_softmax(logits: Tensor, seg: Array, n_segments: int) -> Tensor:
    """Column-wise softmax within each segment, stabilized by the segment max."""
    seg = np.asarray(seg, dtype=np.int64).reshape(-1)
    if seg.size != logits.data.shape[0]:
        raise ShapeError("segment vector length must match logit rows")
    _check_index(seg, n_segments, "segment_softmax")
    x = logits.data
    seg_max = np.full((n_segments, x.shape[1]), -np.inf, dtype=np.float32)
    np.maximum.at(seg_max, seg, x)
    shifted = x - seg_max[seg]
    e = np.exp(shifted)
    denom = _segment_sum(e, seg, n_segments)
    out_data = e / denom[seg]
    out = Tensor(out_data)
    if _recording(logits):
        def bw(g: Array):
            weighted = _segment_sum(out_data * g, seg, n_segments)
            logits.accumulate(out_data * (g - weighted[seg]))
        _record(out, bw)
    return out


class SparseAdj:
    """Immutable CSR adjacency used by the sum-aggregation fast path.

    Holds the operator and its transpose so the backward pass reuses the
    same deterministic scipy kernel.
    """

    def __init__(self, edge_index: Array, num_nodes: int):
        import scipy.sparse as sp

        src, dst = edge_index[0], edge_index[1]
        vals = np.ones(src.shape[0], dtype=np.float32)
        self.mat = sp.csr_matrix((vals, (dst, src)), shape=(num_nodes, num_nodes))
        self.mat_t = self.mat.T.tocsr()


def spmm_sum(adj: SparseAdj, x: Tensor) -> Tensor:
    """out[i] = sum over in-neighbors j of x[j], via CSR."""
    out = Tensor(adj.mat @ x.data)
    if _recording(x):
        def bw(g: Array):
            x.accumulate((adj.mat_t @ g).astype(np.float32))
        _record(out, bw)
    return out


def cross_entropy(logits: Tensor, labels: Array, mask: Array) -> Tensor:
    """Mean negative log-likelihood over masked rows, stabilized log-softmax."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ContractError("cross_entropy mask selects no rows")
    x = logits.data[rows]
    y = labels[rows]
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss_val = -logp[np.arange(rows.size), y].mean(dtype=np.float32)
    out = Tensor(loss_val)
    if _recording(logits):
        soft = np.exp(logp)
        def bw(g: Array):
            d = soft.copy()
            d[np.arange(rows.size), y] -= 1.0
            d *= g.reshape(-1)[0] / np.float32(rows.size)
            full = np.zeros_like(logits.data)
            full[rows] = d
            logits.accumulate(full)
        _record(out, bw)
    return out


def l1_loss(pred: Tensor, target: Array) -> Tensor:
    t = _as_f32_2d(target)
    if t.shape != pred.data.shape:
        raise ShapeError(f"l1_loss shapes disagree: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    out = Tensor(np.abs(diff).mean(dtype=np.float32))
    if _recording(pred):
        sign = np.sign(diff).astype(np.float32) / np.float32(diff.size)
        def bw(g: Array):
            pred.accumulate(sign * g.reshape(-1)[0])
        _record(out, bw)
    return out
