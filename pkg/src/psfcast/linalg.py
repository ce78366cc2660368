"""Dense float64 tensors with reverse-mode gradients.

Every differentiable op records its parents and a closure that maps the
output gradient to input gradients. ``Tensor.backward`` walks the graph in
reverse topological order. Arrays are numpy ``float64`` in row-major order.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return swap_last(self)


class ParamTensor(Tensor):
    """A named learnable tensor; ``grad`` accumulates across backward calls."""

    __slots__ = ()

    def __init__(self, name, value):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x):
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x):
    # log sigma(x) = -softplus(-x), stable for large |x|
    out = -np.logaddexp(0.0, -x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * (1.0 - sig),))


def absolute(x):
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x):
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ----------------------------------------------------------------------------
# reductions and shape plumbing


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def take(x, index):
    """Basic or advanced indexing; the backward pass scatter-adds."""
    out = x.data[index]

    basic = not any(isinstance(i, (list, np.ndarray)) for i in
                    (index if isinstance(index, tuple) else (index,)))

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), back)


def concat(parts: Sequence[Tensor], axis=-1):
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, parts, back)


def stack(parts: Sequence[Tensor], axis=0):
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, parts, back)


def broadcast_to(x, shape):
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (_unbroadcast(g, x.shape),))


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast.

    Gradients: dL/da = dL/dy . b^T and dL/db = a^T . dL/dy.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back)


def softmax_rows(z, mask=None):
    """Softmax over the last axis, stabilised by the row max.

    ``mask`` (boolean, broadcastable) marks allowed entries; the others get an
    additive -1e30 before normalisation and come out as exact zeros.
    """
    z = as_tensor(z)
    zd = z.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        zd = np.where(mask, zd, -1e30)
    shifted = zd - zd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (z,), back)


def log_softmax(z, axis=-1):
    zd = z.data
    shifted = zd - zd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (z,), back)


def layer_norm(x, gain, bias, eps=1e-5, axis=-1):
    """Normalise ``x`` over ``axis`` then apply the affine ``gain``/``bias``.

    ``gain`` and ``bias`` must broadcast against ``x`` after normalisation.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def back(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=axis, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True))
        return gx, gg, gb

    return _make(xhat * gain.data + bias.data, (x, gain, bias), back)


def _im2col(x, k):
    # x: (B, C, H, W) -> (C*k*k, B*H*W), zero "same" padding
    B, C, H, W = x.shape
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(C, B * H * W)
    p = k // 2
    xp = np.zeros((C, B, H + 2 * p, W + 2 * p))
    xp[:, :, p:p + H, p:p + W] = x.transpose(1, 0, 2, 3)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))   # (C, B, H, W, k, k)
    return win.transpose(0, 4, 5, 1, 2, 3).reshape(C * k * k, B * H * W)


def conv2d(x, kernel, bias=None):
    """Same-padded 2D cross-correlation.

    ``x`` is ``C_in x H x W`` or batched ``B x C_in x H x W``; ``kernel`` is
    ``C_out x C_in x k x k`` with odd ``k``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    C_out, C_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kernel.shape}")
    if xd.shape[1] != C_in:
        raise ShapeError(f"conv2d: input has {xd.shape[1]} channels, kernel expects {C_in} "
                         f"(input {x.shape}, kernel {kernel.shape})")
    B, _, H, W = xd.shape
    cols = _im2col(xd, k)
    wmat = kernel.data.reshape(C_out, -1)
    out = wmat @ cols
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
        parents.append(bias)
    out = out.reshape(C_out, B, H, W).transpose(1, 0, 2, 3)

    def back(g):
        if not batched:
            g = g[None]
        gm = g.transpose(1, 0, 2, 3).reshape(C_out, B * H * W)
        gw = (gm @ cols.T).reshape(kernel.shape)
        # input gradient = correlation of g with the flipped, channel-swapped kernel
        wflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C_in, -1)
        gx = (wflip @ _im2col(g, k)).reshape(C_in, B, H, W).transpose(1, 0, 2, 3)
        if not batched:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=1))
        return tuple(grads)

    if not batched:
        out = out[0]
    return _make(np.ascontiguousarray(out), parents, back)


def bilinear_matrix(n_in, n_out):
    """``n_out x n_in`` interpolation weights with align-corners semantics."""
    A = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        A[:, 0] = 1.0
        return A
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    A[np.arange(n_out), lo] = 1.0 - frac
    A[np.arange(n_out), lo + 1] += frac
    return A


def resize_bilinear(x, out_h, out_w):
    """Resize the last two axes with align-corners bilinear interpolation."""
    A = bilinear_matrix(x.shape[-2], out_h)
    B = bilinear_matrix(x.shape[-1], out_w)
    return matmul(matmul(Tensor(A), x), Tensor(B.T))


# ----------------------------------------------------------------------------
# verification


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h=1e-5, indices: Iterable | None = None):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``indices`` restricts the probe to some flat positions; the rest of the
    returned array is left at zero.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a, b):
    """``||a - b|| / max(||a||, ||b||)`` with a tiny floor for all-zero pairs."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# ----------------------------------------------------------------------------
# reproducible random numbers


class XorShift64:
    """xorshift64* generator (Vigna 2016): shifts 12, 25, 27 and multiplier
    0x2545F4914F6CDD1D. ``uniform`` uses the top 53 bits of each output.
    """

    MULT = 0x2545F4914F6CDD1D
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        # splitmix64 scramble so that small seeds do not start in a weak state
        z = (seed + 0x9E3779B97F4A7C15) & self.MASK
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
        z ^= z >> 31
        self.state = z or 0x1234567

    def next_u64(self):
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & self.MASK
        x ^= x >> 27
        self.state = x
        return (x * self.MULT) & self.MASK

    def uniform(self, low=0.0, high=1.0, size=None):
        if size is None:
            return low + (high - low) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))
        n = int(np.prod(size))
        vals = np.fromiter(((self.next_u64() >> 11) for _ in range(n)), dtype=np.float64, count=n)
        return (low + (high - low) * vals / float(1 << 53)).reshape(size)

    def normal(self, size=None):
        # Box-Muller on pairs of uniforms
        shape = () if size is None else size
        n = int(np.prod(shape))
        u1 = self.uniform(size=(n,))
        u2 = self.uniform(size=(n,))
        z = np.sqrt(-2.0 * np.log(1.0 - u1)) * np.cos(2.0 * math.pi * u2)
        return float(z[0]) if size is None else z.reshape(shape)

    def integers(self, low, high, size=None):
        if size is None:
            return low + int(self.next_u64() % (high - low))
        n = int(np.prod(size))
        return np.array([low + int(self.next_u64() % (high - low)) for _ in range(n)], dtype=int).reshape(size)

    def permutation(self, n):
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=int)
