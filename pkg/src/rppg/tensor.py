"""Dense tensors with reverse-mode gradients.

Values are numpy float32 (training default) or float64 (verification mode;
every op preserves the input dtype). Each op builds a node in a dynamic
graph; ``Tensor.backward()`` runs the chain rule in reverse topological
order. Ops may use BLAS internally but never introduce run-to-run
nondeterminism: reduction order is fixed for a fixed thread count.

Video tensors are laid out ``[batch, time, height, width, channels]``.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf showed up where the contract requires finite values."""


_grad_enabled = True

# im2col scratch buffers are capped at this many elements (~64 MB at f32)
_CONV_CHUNK_ELEMS = 1 << 24


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/finite-diff)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A shaped float buffer plus optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._prev = ()

    # -- introspection -------------------------------------------------

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

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def check_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{what} contains NaN/Inf")
        return self

    # -- autodiff ------------------------------------------------------

    def detach(self):
        """Constant view of this value; blocks gradient flow."""
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward() starts from a scalar")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("backward() from a non-finite value")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def t(self):
        return transpose2d(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def relu(self):
        return relu(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


# -- elementwise --------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), backward)


def power(a, p):
    a = _wrap(a)
    p = float(p)
    data = a.data**p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _node(data, (a,), backward)


def exp(a):
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _node(data, (a,), backward)


def log(a):
    a = _wrap(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _node(data, (a,), backward)


def sqrt(a):
    a = _wrap(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / data)

    return _node(data, (a,), backward)


def absolute(a):
    a = _wrap(a)
    data = np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return _node(data, (a,), backward)


def relu(a):
    """Elementwise max(0, x); subgradient 0 at x == 0."""
    a = _wrap(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _node(data, (a,), backward)


# -- shape & reduction ---------------------------------------------------


def reshape(a, *shape):
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _node(data, (a,), backward)


def transpose2d(a):
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError("transpose2d expects a matrix")
    data = a.data.T

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _node(data, (a,), backward)


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            gx = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gx, a.shape))

    return _node(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


# -- linear maps ---------------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects matrices")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(data, (a, b), backward)


def dense(x, weight, bias):
    """Affine map on the trailing axis: ``[..., Cin] -> [..., Cout]``.

    Applied independently at every leading position, so a ``[N, T, Cin]``
    input gets the same per-time-step map at each step.
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"dense: input channels {x.shape[-1]} != weight rows {cin}")
    if bias.shape != (cout,):
        raise ShapeError("dense: bias shape mismatch")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    data = (x2 @ weight.data + bias.data).reshape(*lead, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(x2.T @ g2)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return _node(data, (x, weight, bias), backward)


# -- convolution ---------------------------------------------------------
#
# Convolutions run as one GEMM per kernel tap: slice the padded input at the
# tap offset (a cheap contiguous copy), multiply by the tap's [Cin, Cout]
# matrix, accumulate. On BLAS this beats im2col for these kernel sizes and
# keeps a fixed, deterministic accumulation order.


def _taps(kshape):
    kt, kh, kw = kshape[:3]
    return [(i, j, l) for i in range(kt) for j in range(kh) for l in range(kw)]


def _conv_forward(xp, kernel, out_dims):
    to, ho, wo = out_dims
    n = xp.shape[0]
    cin, cout = kernel.shape[3], kernel.shape[4]
    out = np.zeros((n * to * ho * wo, cout), dtype=xp.dtype)
    tmp = np.empty_like(out)
    for i, j, l in _taps(kernel.shape):
        xs = np.ascontiguousarray(xp[:, i : i + to, j : j + ho, l : l + wo, :])
        np.matmul(xs.reshape(-1, cin), kernel[i, j, l], out=tmp)
        out += tmp
    return out.reshape(n, to, ho, wo, cout)


def _conv_grads(xp, g, kernel, padding, want_kernel, want_input):
    n, to, ho, wo, cout = g.shape
    cin = kernel.shape[3]
    pt, ph, pw = padding
    g2 = g.reshape(-1, cout)
    kg = np.zeros_like(kernel) if want_kernel else None
    xg = np.zeros_like(xp) if want_input else None
    for i, j, l in _taps(kernel.shape):
        if want_kernel:
            xs = np.ascontiguousarray(xp[:, i : i + to, j : j + ho, l : l + wo, :])
            kg[i, j, l] = xs.reshape(-1, cin).T @ g2
        if want_input:
            piece = (g2 @ kernel[i, j, l].T).reshape(n, to, ho, wo, cin)
            xg[:, i : i + to, j : j + ho, l : l + wo, :] += piece
    if want_input:
        t, h, w = xp.shape[1] - 2 * pt, xp.shape[2] - 2 * ph, xp.shape[3] - 2 * pw
        xg = np.ascontiguousarray(xg[:, pt : pt + t, ph : ph + h, pw : pw + w, :])
    return kg, xg


def conv3d(x, kernel, bias, padding=(0, 0, 0)):
    """3-D convolution, stride 1, zero padding.

    ``x [N,T,H,W,Cin]``, ``kernel [kt,kh,kw,Cin,Cout]``, ``bias [Cout]``.
    Output time is ``T + 2*pt - kt + 1`` (same arithmetic for H, W).
    Raises on operand shape mismatch and on non-finite output.
    """
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeError("conv3d expects [N,T,H,W,C] input and [kt,kh,kw,Cin,Cout] kernel")
    kt, kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv3d: input channels {x.shape[-1]} != kernel Cin {cin}")
    if bias.shape != (cout,):
        raise ShapeError("conv3d: bias shape mismatch")
    pt, ph, pw = padding
    padded_dims = (x.shape[1] + 2 * pt, x.shape[2] + 2 * ph, x.shape[3] + 2 * pw)
    if kt > padded_dims[0] or kh > padded_dims[1] or kw > padded_dims[2]:
        raise ShapeError(f"conv3d: kernel {kernel.shape[:3]} exceeds padded input {padded_dims}")

    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
    out_dims = tuple(p - k + 1 for p, k in zip(padded_dims, (kt, kh, kw)))
    data = _conv_forward(xp, kernel.data, out_dims) + bias.data
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("conv3d produced NaN/Inf")

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1, 2, 3)))
        kg, xg = _conv_grads(
            xp, g, kernel.data, padding, kernel.requires_grad, x.requires_grad
        )
        if kernel.requires_grad:
            kernel._accumulate(kg)
        if x.requires_grad:
            x._accumulate(xg)

    return _node(data, (x, kernel, bias), backward)


def avg_pool3d(x, window=(1, 2, 2)):
    """Non-overlapping average pooling; spatial dims floor-divide.

    Trailing rows/columns that do not fill a window are dropped (62->31,
    31->15, 15->7), and receive zero gradient.
    """
    x = _wrap(x)
    if x.ndim != 5:
        raise ShapeError("avg_pool3d expects [N,T,H,W,C]")
    wt, wh, ww = window
    if wt != 1:
        raise ShapeError("avg_pool3d pools spatially only (window time must be 1)")
    n, t, h, w, c = x.shape
    if h < wh or w < ww:
        raise ShapeError(f"avg_pool3d: window {window} larger than input {x.shape}")
    ho, wo = h // wh, w // ww
    crop = x.data[:, :, : ho * wh, : wo * ww, :]
    data = crop.reshape(n, t, ho, wh, wo, ww, c).mean(axis=(3, 5))

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, wh, axis=2), ww, axis=3) / float(wh * ww)
        gx[:, :, : ho * wh, : wo * ww, :] = spread
        x._accumulate(gx)

    return _node(data, (x,), backward)


def global_spatial_avg(x):
    """Mean over H and W: ``[N,T,H,W,C] -> [N,T,C]``."""
    x = _wrap(x)
    if x.ndim != 5:
        raise ShapeError("global_spatial_avg expects [N,T,H,W,C]")
    n, t, h, w, c = x.shape
    data = x.data.mean(axis=(2, 3))

    def backward(g):
        if x.requires_grad:
            gx = np.broadcast_to(g[:, :, None, None, :], x.shape) / float(h * w)
            x._accumulate(np.ascontiguousarray(gx))

    return _node(data, (x,), backward)


def batch_norm(x, gamma, beta, run_mean, run_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over all non-channel axes.

    Training mode normalizes with the biased batch variance and updates the
    running buffers in place (exponential moving average, the same biased
    statistic). Eval mode uses the running buffers. Channels are the
    trailing axis.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.size == 0:
        raise ShapeError("batch_norm on an empty tensor")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm: gamma/beta must match channel count")
    axes = tuple(range(x.ndim - 1))
    m = x.size // c

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        run_mean.data[...] = (1.0 - momentum) * run_mean.data + momentum * mu
        run_var.data[...] = (1.0 - momentum) * run_var.data + momentum * var
    else:
        mu = run_mean.data
        var = run_var.data

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gxh = g * gamma.data
            if training:
                # batch statistics depend on x
                s1 = gxh.sum(axis=axes)
                s2 = (gxh * xhat).sum(axis=axes)
                x._accumulate((gxh - (s1 + xhat * s2) / m) * inv_std)
            else:
                x._accumulate(gxh * inv_std)

    return _node(data, (x, gamma, beta), backward)


# -- verification ---------------------------------------------------------


def finite_diff_check(fn, inputs, eps=1e-5, max_coords=24, seed=0):
    """Compare reverse-mode gradients of ``fn(*inputs)`` against central
    differences of a fixed random linear functional of the output.

    Returns the max relative error over sampled coordinates of every
    grad-requiring input. Run with float64 inputs for meaningful bounds.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    w = rng.standard_normal(out.shape).astype(out.dtype) if out.ndim else np.asarray(1.0, out.dtype)
    loss = tsum(mul(out, Tensor(w)))
    loss.backward()

    def probe():
        with no_grad():
            return float(np.sum(fn(*inputs).data * w))

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        if t.grad is None:
            raise ValueError("input received no gradient")
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        k = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = probe()
            flat[i] = orig - eps
            fm = probe()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            analytic = float(gflat[i])
            denom = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
