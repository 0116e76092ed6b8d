"""Dense-tensor substrate with tape-based reverse-mode differentiation.

Values are numpy arrays (float32 or float64, selectable per tensor).
Every differentiable op appends a node to an implicit tape (the DAG of
parents recorded on each output); ``backward`` replays that tape once in
reverse topological order. Broadcasting follows numpy semantics for
elementwise ops; matrix ops broadcast only over leading batch axes.
"""

from __future__ import annotations

import numpy as np

F32 = np.float32
F64 = np.float64


def _asdtype(dtype):
    d = np.dtype(dtype)
    if d not in (np.dtype(F32), np.dtype(F64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    return d


class Tensor:
    """N-dimensional array plus the bookkeeping needed for backprop.

    ``requires_grad`` marks leaves that should accumulate gradients;
    non-leaf tensors carry references to their parents and a closure that
    pushes the output gradient back to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.dtype(F32), np.dtype(F64)):
            arr = arr.astype(F64 if dtype is None else _asdtype(dtype))
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self):
        """Reverse sweep from a scalar loss, populating leaf gradients."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        tape = Tape(self)
        tape.run()

    # -- operator sugar (thin wrappers over module-level ops) --------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, Tensor(np.array(-1.0, dtype=self.dtype)))


class Tape:
    """Ordered record of the ops reachable from a root tensor.

    Built by iterative depth-first search; the reverse of the collected
    order is a valid topological order, so the backward sweep visits each
    node exactly once.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = []
        visited = set()
        stack = [(root, iter(root._parents))]
        visited.add(id(root))
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                stack.pop()
                self.nodes.append(node)

    def run(self):
        self.root._accumulate(np.ones_like(self.root.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free intermediate grads/closures; leaves keep theirs
                if not node.requires_grad:
                    node.grad = None
                node._backward = None


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


_grad_enabled = True


class no_grad:
    """Context manager: ops inside record nothing on the tape."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _needs_tape(*tensors):
    if not _grad_enabled:
        return False
    return any(t.requires_grad or t._backward is not None or t._parents for t in tensors)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _needs_tape(*parents):
        out._parents = tuple(parents)
        out._backward = backward_fn(out)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        def run(g):
            a._accumulate(_unbroadcast(g, a.data.shape))
            b._accumulate(_unbroadcast(g, b.data.shape))
        return run
    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        def run(g):
            a._accumulate(_unbroadcast(g, a.data.shape))
            b._accumulate(-_unbroadcast(g, b.data.shape))
        return run
    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        def run(g):
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))
        return run
    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, k: float) -> Tensor:
    def bw(out):
        def run(g):
            a._accumulate(g * k)
        return run
    return _make(a.data * k, (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    def bw(out):
        def run(g):
            a._accumulate(g * out.data)
        return run
    return _make(y, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(out):
        def run(g):
            a._accumulate(g / a.data)
        return run
    return _make(np.log(a.data), (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient is passed through only where unclipped."""
    y = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    def bw(out):
        def run(g):
            a._accumulate(g * inside)
        return run
    return _make(y, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    def bw(out):
        def run(g):
            a._accumulate(g * mask)
        return run
    return _make(a.data * mask, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    def bw(out):
        def run(g):
            a._accumulate(g * out.data * (1.0 - out.data))
        return run
    return _make(y, (a,), bw)


# -- reductions -------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)
    def bw(out):
        def run(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape))
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.data.shape))
        return run
    return _make(y, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation -----------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    def bw(out):
        def run(g):
            a._accumulate(g.reshape(a.data.shape))
        return run
    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    def bw(out):
        def run(g):
            a._accumulate(g.transpose(inv))
        return run
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def concat(tensors, axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    def bw(out):
        def run(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])
        return run
    return _make(np.concatenate(datas, axis=axis), tuple(tensors), bw)


def take_last_axis(a: Tensor, indices) -> Tensor:
    """Gather columns of the last axis (used for channel extraction)."""
    idx = np.asarray(indices, dtype=np.intp)
    def bw(out):
        def run(g):
            full = np.zeros_like(a.data)
            np.add.at(full, (..., idx), g)
            a._accumulate(full)
        return run
    return _make(np.ascontiguousarray(a.data[..., idx]), (a,), bw)


def put_last_axis(base: Tensor, indices, values: Tensor) -> Tensor:
    """Copy of ``base`` with last-axis columns ``indices`` replaced by ``values``."""
    idx = np.asarray(indices, dtype=np.intp)
    y = base.data.copy()
    y[..., idx] = values.data
    def bw(out):
        def run(g):
            gb = g.copy()
            gb[..., idx] = 0.0
            base._accumulate(gb)
            values._accumulate(g[..., idx])
        return run
    return _make(y, (base, values), bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sel = [slice(None)] * a.data.ndim
    sel[axis] = slice(start, stop)
    sel = tuple(sel)
    def bw(out):
        def run(g):
            full = np.zeros_like(a.data)
            full[sel] = g
            a._accumulate(full)
        return run
    return _make(np.ascontiguousarray(a.data[sel]), (a,), bw)


# -- neural primitives -------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ weight.T + bias over the last axis, batched over leading axes.

    ``weight`` has shape (out, in); ``bias`` shape (out,).
    """
    if x.data.shape[-1] != weight.data.shape[1]:
        raise ValueError(
            f"linear: input last axis {x.data.shape} does not match weight {weight.data.shape}"
        )
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y = x2 @ weight.data.T + bias.data
    def bw(out):
        def run(g):
            g2 = g.reshape(-1, g.shape[-1])
            x._accumulate((g2 @ weight.data).reshape(x.data.shape))
            weight._accumulate(g2.T @ x2)
            bias._accumulate(g2.sum(axis=0))
        return run
    return _make(y.reshape(*lead, weight.data.shape[0]), (x, weight, bias), bw)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no scale/shift)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    def bw(out):
        def run(g):
            m1 = g.mean(axis=-1, keepdims=True)
            m2 = (g * y).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (g - m1 - y * m2))
        return run
    return _make(y, (x,), bw)


def haar_lowpass(u: Tensor) -> Tensor:
    """Pairwise mean along the last axis; odd trailing element dropped."""
    L = u.data.shape[-1]
    if L < 2:
        raise ValueError(f"haar_lowpass needs length >= 2, got {L}")
    half = L // 2
    even = u.data[..., 0 : 2 * half : 2]
    odd = u.data[..., 1 : 2 * half : 2]
    def bw(out):
        def run(g):
            full = np.zeros_like(u.data)
            full[..., 0 : 2 * half : 2] = 0.5 * g
            full[..., 1 : 2 * half : 2] = 0.5 * g
            u._accumulate(full)
        return run
    return _make(0.5 * (even + odd), (u,), bw)


def upsample_linear(x: Tensor, target_len: int) -> Tensor:
    """Endpoint-aligned linear interpolation along the last axis.

    Output position p samples source coordinate p*(L-1)/(target_len-1);
    a length-1 source broadcasts its single value.
    """
    if target_len == 0:
        raise ValueError("upsample_linear: target length must be positive")
    L = x.data.shape[-1]
    if target_len < L:
        raise ValueError(f"upsample_linear: target {target_len} shorter than source {L}")
    if L == 1:
        def bw(out):
            def run(g):
                x._accumulate(g.sum(axis=-1, keepdims=True))
            return run
        return _make(np.repeat(x.data, target_len, axis=-1), (x,), bw)
    if target_len == 1:
        coords = np.zeros(1)
    else:
        coords = np.arange(target_len) * (L - 1) / (target_len - 1)
    i0 = np.minimum(coords.astype(np.intp), L - 2)
    frac = (coords - i0).astype(x.data.dtype)
    w0 = 1.0 - frac
    y = x.data[..., i0] * w0 + x.data[..., i0 + 1] * frac
    def bw(out):
        def run(g):
            full = np.zeros_like(x.data)
            np.add.at(full, (..., i0), g * w0)
            np.add.at(full, (..., i0 + 1), g * frac)
            x._accumulate(full)
        return run
    return _make(y, (x,), bw)


def pad_replicate_last(x: Tensor, axis: int, count: int) -> Tensor:
    """Pad ``axis`` by repeating its final slice ``count`` times."""
    if count == 0:
        return x
    sel = [slice(None)] * x.data.ndim
    sel[axis] = slice(-1, None)
    tail = np.repeat(x.data[tuple(sel)], count, axis=axis)
    def bw(out):
        def run(g):
            idx_body = [slice(None)] * g.ndim
            idx_body[axis] = slice(0, x.data.shape[axis])
            idx_pad = [slice(None)] * g.ndim
            idx_pad[axis] = slice(x.data.shape[axis], None)
            gb = g[tuple(idx_body)].copy()
            idx_last = [slice(None)] * g.ndim
            idx_last[axis] = slice(-1, None)
            gb[tuple(idx_last)] += g[tuple(idx_pad)].sum(axis=axis, keepdims=True)
            x._accumulate(gb)
        return run
    return _make(np.concatenate([x.data, tail], axis=axis), (x,), bw)


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup; gradient scatters back only into looked-up rows."""
    idx = np.asarray(indices, dtype=np.intp)
    def bw(out):
        def run(g):
            full = np.zeros_like(table.data)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table._accumulate(full)
        return run
    return _make(table.data[idx], (table,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep).astype(x.data.dtype) / keep
    def bw(out):
        def run(g):
            x._accumulate(g * mask)
        return run
    return _make(x.data * mask, (x,), bw)
