"""Dense tensors with reverse-mode automatic differentiation.

Float32 is the working precision for all training; float64 tensors are
supported so numerical checks can run at full precision.  The op set is
exactly what the three networks need: elementwise arithmetic with
broadcasting, reductions, 2-d convolution with dilation, align-corners
bilinear upsampling, global spatial max pooling, sigmoid / temperature
softmax, and binary cross entropy.

A computation graph is recorded only while at least one input has
``requires_grad`` set and grad mode is enabled (see ``no_grad``).
``backward`` walks the recorded nodes once, in reverse topological
order, which makes repeated runs bit-identical on the same machine.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "mul",
    "reshape",
    "concat",
    "tsum",
    "relu",
    "sigmoid",
    "softmax_T",
    "conv2d",
    "upsample_bilinear",
    "spatial_max_pool",
    "bce_loss",
    "backward",
    "SGD",
    "Adam",
]

BCE_EPS = 1e-7

_grad_enabled = True

# bumped once per backward() call; optimizers use it to detect stale grads
_backward_counter = 0


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    ``data`` is contiguous and row-major.  ``grad`` exists iff
    ``requires_grad`` and always matches ``data``'s shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # float64 survives so numerical oracles can run at full precision;
            # everything else lands in the float32 working precision
            dtype = np.float64 if (isinstance(data, (np.ndarray, np.generic)) and data.dtype == np.float64) else np.float32
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._prev: tuple = ()
        self._backward = None

    # -- constructors -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=np.float32):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)

    @staticmethod
    def ones(shape, requires_grad=False, dtype=np.float32):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)

    # -- introspection ------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=self.data.dtype)
        else:
            self.grad += g

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make_node(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    """Attach a graph node to ``out`` if recording is active.

    Interior nodes allocate their grad buffer lazily on first
    accumulation during backward; user-constructed leaves keep the eager
    buffer from __init__."""
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.grad = None
        out._prev = inputs
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def _bw(g):
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.data.shape).astype(a.dtype, copy=False))
        if b.requires_grad:
            b._acc(_unbroadcast(g, b.data.shape).astype(b.dtype, copy=False))

    return _make_node(out, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def _bw(g):
        if a.requires_grad:
            a._acc(_unbroadcast(g * b.data, a.data.shape).astype(a.dtype, copy=False))
        if b.requires_grad:
            b._acc(_unbroadcast(g * a.data, b.data.shape).astype(b.dtype, copy=False))

    return _make_node(out, (a, b), _bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def _bw(g):
        if a.requires_grad:
            a._acc(g.reshape(a.data.shape))

    return _make_node(out, (a,), _bw)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._acc(g[tuple(idx)])

    return _make_node(out, tensors, _bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def _bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._acc(g)  # scalar broadcast
        elif keepdims:
            a._acc(g)
        else:
            a._acc(np.expand_dims(g, axis))

    return _make_node(out, (a,), _bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return mul(tsum(a), _as_tensor(1.0 / n, a.dtype))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def _bw(g):
        if a.requires_grad:
            a._acc(g * (a.data > 0))

    return _make_node(out, (a,), _bw)


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    out = Tensor(y)

    def _bw(g):
        if a.requires_grad:
            a._acc(g * (y * (1 - y)))

    return _make_node(out, (a,), _bw)


def softmax_T(a: Tensor, T: float) -> Tensor:
    """Temperature softmax over the last axis, max-subtracted for stability."""
    if not T > 0:
        raise ValueError(f"softmax temperature must be positive, got {T}")
    z = a.data / a.dtype.type(T)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def _bw(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._acc((y * (g - dot) / T).astype(a.dtype, copy=False))

    return _make_node(out, (a,), _bw)


# ---------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of NCHW input with FCkk kernels.

    Odd kernels only.  Output size follows the usual
    (H + 2p - d*(k-1) - 1)/s + 1 arithmetic and must come out a positive
    integer.
    """
    N, C, H, W = x.data.shape
    F, Cw, kh, kw = w.data.shape
    if Cw != C:
        raise ValueError(f"conv2d: input has {C} channels but kernel expects {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1:
        raise ValueError("conv2d: stride and dilation must be >= 1")
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    num_h = H + 2 * padding - span_h
    num_w = W + 2 * padding - span_w
    if num_h < 0 or num_w < 0:
        raise ValueError(
            f"conv2d: non-positive output size for input {H}x{W}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}, dilation {dilation}")
    out_h = num_h // stride + 1
    out_w = num_w // stride + 1

    Hp, Wp = H + 2 * padding, W + 2 * padding
    if padding:
        xp = np.zeros((N, C, Hp, Wp), dtype=x.dtype)
        xp[:, :, padding:padding + H, padding:padding + W] = x.data
    else:
        xp = x.data

    # im2col by kernel offset: cheap strided views gathered into one matrix
    cols = np.empty((N, C, kh, kw, out_h, out_w), dtype=x.dtype)
    for iy in range(kh):
        y0 = iy * dilation
        for ix in range(kw):
            x0 = ix * dilation
            cols[:, :, iy, ix] = xp[:, :, y0:y0 + 1 + stride * (out_h - 1):stride,
                                    x0:x0 + 1 + stride * (out_w - 1):stride]
    cols_mat = cols.reshape(N, C * kh * kw, out_h * out_w)
    w_mat = w.data.reshape(F, C * kh * kw)
    y = np.matmul(w_mat, cols_mat)  # [N, F, L]
    if b is not None:
        y = y + b.data.reshape(1, F, 1)
    out = Tensor(y.reshape(N, F, out_h, out_w))

    inputs = (x, w) if b is None else (x, w, b)

    def _bw(g):
        g_mat = g.reshape(N, F, out_h * out_w)
        if b is not None and b.requires_grad:
            b._acc(g_mat.sum(axis=(0, 2)).astype(b.dtype, copy=False))
        if w.requires_grad:
            # batched sgemm with a strided transpose avoids tensordot's copies
            gw = np.matmul(g_mat, cols_mat.transpose(0, 2, 1)).sum(axis=0)
            w._acc(gw.reshape(w.data.shape).astype(w.dtype, copy=False))
        if x.requires_grad:
            gcols = np.matmul(w_mat.T, g_mat).reshape(N, C, kh, kw, out_h, out_w)
            gxp = np.zeros((N, C, Hp, Wp), dtype=x.dtype)
            for iy in range(kh):
                y0 = iy * dilation
                for ix in range(kw):
                    x0 = ix * dilation
                    gxp[:, :, y0:y0 + 1 + stride * (out_h - 1):stride,
                        x0:x0 + 1 + stride * (out_w - 1):stride] += gcols[:, :, iy, ix]
            if padding:
                gxp = gxp[:, :, padding:padding + H, padding:padding + W]
            x._acc(gxp)

    return _make_node(out, inputs, _bw)


_LERP_CACHE: dict = {}


def _lerp_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """Dense [dst, src] align-corners linear interpolation matrix."""
    key = (src, dst, np.dtype(dtype).str)
    m = _LERP_CACHE.get(key)
    if m is None:
        m = np.zeros((dst, src), dtype=dtype)
        if dst == 1 or src == 1:
            m[:, 0] = 1
        else:
            pos = np.arange(dst) * (src - 1) / (dst - 1)
            lo = np.minimum(pos.astype(np.int64), src - 2)
            frac = pos - lo
            m[np.arange(dst), lo] = 1 - frac
            m[np.arange(dst), lo + 1] = frac
        _LERP_CACHE[key] = m
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear upsampling of NCHW input."""
    N, C, h, w = x.data.shape
    if out_h < h or out_w < w:
        raise ValueError(f"upsample_bilinear: target {out_h}x{out_w} smaller than input {h}x{w}")
    My = _lerp_matrix(h, out_h, x.dtype)
    Mx = _lerp_matrix(w, out_w, x.dtype)
    out = Tensor(np.matmul(np.matmul(My, x.data), Mx.T))

    def _bw(g):
        if x.requires_grad:
            x._acc(np.matmul(np.matmul(My.T, g), Mx))

    return _make_node(out, (x,), _bw)


def spatial_max_pool(x: Tensor) -> Tensor:
    """Global per-channel max over H,W; gradient goes to the first
    (row-major) argmax position only."""
    N, K, h, w = x.data.shape
    flat = x.data.reshape(N, K, h * w)
    idx = flat.argmax(axis=2)  # first occurrence in row-major order
    out = Tensor(np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0])

    def _bw(g):
        if x.requires_grad:
            gflat = np.zeros((N, K, h * w), dtype=x.dtype)
            np.put_along_axis(gflat, idx[:, :, None], g[:, :, None], axis=2)
            x._acc(gflat.reshape(N, K, h, w))

    return _make_node(out, (x,), _bw)


# ---------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------

def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross entropy; predictions clamped to [eps, 1-eps]."""
    if pred.data.shape != target.data.shape:
        raise ValueError(f"bce_loss: shape mismatch {pred.data.shape} vs {target.data.shape}")
    eps = pred.dtype.type(BCE_EPS)
    p = np.clip(pred.data, eps, 1 - eps)
    t = target.data
    loss = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean()
    out = Tensor(np.asarray(loss, dtype=pred.dtype))
    n = pred.data.size

    def _bw(g):
        if pred.requires_grad:
            inside = (pred.data >= eps) & (pred.data <= 1 - eps)
            gp = np.where(inside, (p - t) / (p * (1 - p)), 0) * (g / n)
            pred._acc(gp.astype(pred.dtype, copy=False))
        if target.requires_grad:
            target._acc(((np.log1p(-p) - np.log(p)) * (g / n)).astype(target.dtype, copy=False))

    return _make_node(out, (pred, target), _bw)


# ---------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``.

    ``loss`` must hold a single element.  Nodes are visited exactly once,
    in reverse of their recorded forward order.
    """
    global _backward_counter
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad[...] = 1
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    _backward_counter += 1


# ---------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------

class _Optimizer:
    """Shared bookkeeping: learning rate, step counter, staleness guard."""

    def __init__(self, params, lr: float):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.step_count = 0
        self._last_backward = _backward_counter

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        if _backward_counter == self._last_backward:
            warnings.warn("optimizer step before any new backward pass; skipping", stacklevel=2)
            return
        self._last_backward = _backward_counter
        self.step_count += 1
        self._apply()

    def _apply(self):
        raise NotImplementedError


class SGD(_Optimizer):
    def _apply(self):
        for p in self.params:
            p.data -= p.dtype.type(self.lr) * p.grad


class Adam(_Optimizer):
    """Adam with bias correction; moments kept in the parameter dtype."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _apply(self):
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** t
        c2 = 1 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * (p.grad * p.grad)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
