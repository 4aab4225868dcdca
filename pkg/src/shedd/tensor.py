"""Dense tensors with reverse-mode automatic differentiation.

Data lives in numpy arrays (float32 by default, float64 supported so test
oracles can run at higher precision). Every differentiable operation records
a graph node holding a backward closure; `backward()` walks the graph once in
reverse topological order and accumulates gradients additively.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32
LOG_CLAMP = 1e-12

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class GraphNode:
    """One recorded operation: kind, parent tensors, backward rule."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; strict shapes for tensor-tensor, scalars allowed
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)


def _result(data, parents, op, backward_fn):
    """Wrap an op output, recording a graph node when gradients are live."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = GraphNode(op, tuple(parents), backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Populate .grad on every reachable tensor that requires gradients."""
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor that does not require gradients")

    # iterative post-order DFS; each node visited once
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            topo.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in visited:
                    stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for t in reversed(topo):
        if t.node is not None and t.grad is not None:
            t.node.backward_fn(t.grad)


# ---------------------------------------------------------------------------
# creation

def _rng_from(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def create(shape, init="zeros", *, value=0.0, lo=0.0, hi=1.0, fan_in=None,
           seed=0, requires_grad=False, dtype=DEFAULT_DTYPE) -> Tensor:
    """Allocate a tensor: zeros | constant | uniform(lo,hi) | kaiming(fan_in)."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif init == "uniform":
        if not lo < hi:
            raise ShapeError(f"uniform init needs lo < hi, got [{lo}, {hi})")
        data = _rng_from(seed).uniform(lo, hi, size=shape).astype(dtype)
    elif init == "kaiming":
        if fan_in is None or fan_in < 1:
            raise ShapeError("kaiming init needs a positive fan_in")
        bound = float(np.sqrt(6.0 / fan_in))
        data = _rng_from(seed).uniform(-bound, bound, size=shape).astype(dtype)
    else:
        raise ShapeError(f"unknown init '{init}'")
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _result(a.data + b.data, (a, b), "add", bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, -g)
    return _result(a.data - b.data, (a, b), "sub", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _result(a.data * b.data, (a, b), "mul", bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    def bwd(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))
    return _result(a.data / b.data, (a, b), "div", bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    def bwd(g):
        _accumulate(a, g * c)
    return _result(a.data * np.asarray(c, dtype=a.data.dtype), (a,), "scale", bwd)


def shift(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        _accumulate(a, g)
    return _result(a.data + np.asarray(c, dtype=a.data.dtype), (a,), "shift", bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)
    def bwd(g):
        _accumulate(a, g * (a.data > 0))
    return _result(out_data, (a,), "relu", bwd)


def log(a: Tensor) -> Tensor:
    """Natural log with inputs clamped to >= 1e-12; gradient is zero in the
    clamped region (the derivative of the clamped function)."""
    clamped = np.maximum(a.data, np.asarray(LOG_CLAMP, dtype=a.data.dtype))
    inside = a.data >= LOG_CLAMP
    def bwd(g):
        _accumulate(a, np.where(inside, g / clamped, 0))
    return _result(np.log(clamped), (a,), "log", bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    def bwd(g):
        _accumulate(a, g * out_data)
    return _result(out_data, (a,), "exp", bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    # cap the derivative near zero, mirroring the log clamp
    safe = np.maximum(out_data, np.asarray(1e-12, dtype=a.data.dtype))
    def bwd(g):
        _accumulate(a, g * 0.5 / safe)
    return _result(out_data, (a,), "sqrt", bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)
    return _result(a.data @ b.data, (a, b), "matmul", bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    def bwd(g):
        _accumulate(a, g.T)
    return _result(a.data.T.copy(), (a,), "transpose", bwd)


def add_row_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[b,n] + bias[n], bias broadcast over rows."""
    if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_row_bias: {x.shape} vs {bias.shape}")
    def bwd(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=0))
    return _result(x.data + bias.data[None, :], (x, bias), "add_row_bias", bwd)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[b,c,h,w] + bias[c], bias broadcast over batch and space."""
    if x.ndim != 4 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_channel_bias: {x.shape} vs {bias.shape}")
    def bwd(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=(0, 2, 3)))
    return _result(x.data + bias.data[None, :, None, None], (x, bias), "add_channel_bias", bwd)


# ---------------------------------------------------------------------------
# convolution and pooling

def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of x[b,ci,h,w] with kernel[co,ci,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    b, ci, h, w = x.shape
    co, ci_k, kh, kw = kernel.shape
    if ci != ci_k:
        raise ShapeError(f"conv2d channel mismatch: input {ci} vs kernel {ci_k}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d needs stride >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    # im2col in [b, ci*kh*kw, ho*wo] layout: the fill loop below copies
    # contiguous-ish strided slices and the products are batched GEMMs,
    # avoiding large transposes
    cols = np.empty((b, ci, kh, kw, ho, wo), dtype=x.data.dtype)
    for m in range(kh):
        for n in range(kw):
            cols[:, :, m, n] = xp[:, :, m:m + stride * ho:stride, n:n + stride * wo:stride]
    cols = cols.reshape(b, ci * kh * kw, ho * wo)
    kmat = kernel.data.reshape(co, ci * kh * kw)
    out = np.matmul(kmat[None], cols).reshape(b, co, ho, wo)

    def bwd(g):
        gmat = g.reshape(b, co, ho * wo)
        if kernel.requires_grad:
            gk = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(kernel, gk.reshape(kernel.shape))
        if x.requires_grad:
            gcols = np.matmul(kmat.T[None], gmat).reshape(b, ci, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for m in range(kh):
                for n in range(kw):
                    gxp[:, :, m:m + stride * ho:stride, n:n + stride * wo:stride] += \
                        gcols[:, :, m, n]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, gxp)

    return _result(out, (x, kernel), "conv2d", bwd)


def avg_pool2d(x: Tensor, k=2) -> Tensor:
    """Non-overlapping k x k average pooling; spatial extents must divide by k."""
    if x.ndim != 4:
        raise ShapeError("avg_pool2d expects a 4-D tensor")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: extents {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    inv = 1.0 / (k * k)
    if k == 2:
        d = x.data
        out = (d[:, :, ::2, ::2] + d[:, :, ::2, 1::2] +
               d[:, :, 1::2, ::2] + d[:, :, 1::2, 1::2]) * np.asarray(inv, dtype=d.dtype)
    else:
        out = x.data.reshape(b, c, ho, k, wo, k).mean(axis=(3, 5))
    def bwd(g):
        gx = np.empty_like(x.data)
        gs = (g * inv).astype(x.data.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i::k, j::k] = gs
        _accumulate(x, gx)
    return _result(out, (x,), "avg_pool2d", bwd)


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
    return tuple(ax % ndim for ax in axes)


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes)
    def bwd(g):
        if axes is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axes), x.shape))
    return _result(np.asarray(out, dtype=x.data.dtype), (x,), "sum", bwd)


def tmean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.mean(axis=axes)
    if axes is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[a] for a in axes]))
    inv = 1.0 / count
    def bwd(g):
        if axes is None:
            _accumulate(x, np.broadcast_to(g * inv, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g * inv, axes), x.shape))
    return _result(np.asarray(out, dtype=x.data.dtype), (x,), "mean", bwd)


def tmax(x: Tensor, axis=None):
    """Max reduction; returns (values, argmax indices). Gradient flows to the
    position numpy's argmax selects (first occurrence)."""
    if axis is not None and isinstance(axis, (tuple, list)):
        raise ShapeError("tmax supports a single axis")
    _norm_axis(axis, x.ndim)
    idx = x.data.argmax(axis=axis)
    out = x.data.max(axis=axis)
    def bwd(g):
        gx = np.zeros_like(x.data)
        if axis is None:
            gx.reshape(-1)[idx] = g
        else:
            np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        _accumulate(x, gx)
    return _result(np.asarray(out, dtype=x.data.dtype), (x,), "max", bwd), idx


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - dot))
    return _result(y, (x,), "softmax", bwd)


# ---------------------------------------------------------------------------
# shape surgery and indexing

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    def bwd(g):
        _accumulate(x, g.reshape(x.shape))
    return _result(x.data.reshape(shape), (x,), "reshape", bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D tensor")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"column slice [{start}:{stop}] out of range for {x.shape}")
    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        _accumulate(x, gx)
    return _result(x.data[:, start:stop].copy(), (x,), "slice_cols", bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {x.shape}")
    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        _accumulate(x, gx)
    return _result(x.data[start:stop].copy(), (x,), "slice_rows", bwd)


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    base = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != base:
            raise ShapeError("concat_rows: trailing shapes differ")
    counts = [t.shape[0] for t in tensors]
    offsets = np.cumsum([0] + counts)
    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[lo:hi])
    return _result(np.concatenate([t.data for t in tensors], axis=0),
                   tuple(tensors), "concat_rows", bwd)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: {a.shape} vs {b.shape}")
    na = a.shape[1]
    def bwd(g):
        _accumulate(a, g[:, :na])
        _accumulate(b, g[:, na:])
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), "concat_cols", bwd)


def pick(x: Tensor, indices) -> Tensor:
    """Select x[i, indices[i]] for each row i; returns a 1-D tensor."""
    if x.ndim != 2:
        raise ShapeError("pick expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"pick: index shape {idx.shape} vs rows {x.shape[0]}")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ShapeError("pick: index out of range")
    rows = np.arange(x.shape[0])
    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        _accumulate(x, gx)
    return _result(x.data[rows, idx].copy(), (x,), "pick", bwd)


def constant(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """Non-trainable tensor wrapping the given values."""
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_diff_grad(f, x: Tensor, step=1e-3) -> Tensor:
    """Central-difference gradient of a scalar-valued f at x, in float64."""
    if step <= 0:
        raise ContractError("finite_diff_grad needs step > 0")
    base = x.data.astype(np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(base.copy(), dtype=np.float64)).item()
            flat[i] = orig - step
            fm = f(Tensor(base.copy(), dtype=np.float64)).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
    return Tensor(grad, dtype=np.float64)
