"""Reverse-mode differentiation over numpy arrays.

A Tensor wraps an ndarray and records the op that produced it; backward()
walks the recorded graph in reverse topological order and accumulates
gradients. Only the ops the segmentation network and the survival MLPs
actually need are provided; convolution and normalization carry hand-derived
backward passes (checked against finite differences in the test suite).

Parents are kept in ordered tuples and the topological sort is a
deterministic DFS, so gradient accumulation order (and therefore the float
result) is identical across runs.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch


class Tensor:
    """N-dimensional float array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
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

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this (scalar) tensor through the graph."""
        if self.data.size != 1:
            raise ShapeMismatch("backward() requires a scalar tensor")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic (same shape, or python scalar) --------------

    def _binary_prep(self, other):
        if isinstance(other, Tensor):
            if other.data.shape != self.data.shape and other.data.size != 1:
                raise ShapeMismatch(
                    f"elementwise op on shapes {self.data.shape} vs {other.data.shape}")
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._binary_prep(other)
        out = Tensor(self.data + other.data,
                     self.requires_grad or other.requires_grad,
                     (self, other))

        def _bw(g):
            if self.requires_grad or self._parents:
                self._accum(g)
            if other.requires_grad or other._parents:
                other._accum(g if other.data.shape == g.shape else g.sum())
        out._backward = _bw
        return out

    def __mul__(self, other):
        other = self._binary_prep(other)
        out = Tensor(self.data * other.data,
                     self.requires_grad or other.requires_grad,
                     (self, other))

        def _bw(g):
            if self.requires_grad or self._parents:
                gs = g * other.data
                self._accum(gs if self.data.shape == gs.shape else gs.sum())
            if other.requires_grad or other._parents:
                go = g * self.data
                other._accum(go if other.data.shape == go.shape else go.sum())
        out._backward = _bw
        return out

    def __pow__(self, exponent):
        assert isinstance(exponent, (int, float))
        out = Tensor(self.data ** exponent, self.requires_grad, (self,))

        def _bw(g):
            self._accum(g * exponent * self.data ** (exponent - 1))
        out._backward = _bw
        return out

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / other)

    __radd__ = __add__
    __rmul__ = __mul__

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     self.requires_grad, (self,))
        shape = self.data.shape

        def _bw(g):
            if axis is None:
                self._accum(np.broadcast_to(g, shape))
                return
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            self._accum(np.broadcast_to(g, shape))
        out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), self.requires_grad, (self,))
        orig = self.data.shape

        def _bw(g):
            self._accum(g.reshape(orig))
        out._backward = _bw
        return out

    def detach(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.grad is not None})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


# -- convolution -------------------------------------------------------------

def _conv_out_size(n: int, k: int, pad: int, stride: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, out_shape) -> np.ndarray:
    """Unfold padded (N,C,D,H,W) into (N, C*k^3, Do*Ho*Wo)."""
    n, c = xp.shape[:2]
    do, ho, wo = out_shape
    col = np.empty((n, c, k, k, k, do, ho, wo), dtype=xp.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                col[:, :, kd, kh, kw] = xp[
                    :, :,
                    kd:kd + stride * (do - 1) + 1:stride,
                    kh:kh + stride * (ho - 1) + 1:stride,
                    kw:kw + stride * (wo - 1) + 1:stride]
    return col.reshape(n, c * k ** 3, do * ho * wo)


def _col2im(dcol: np.ndarray, x_shape, k: int, pad: int, stride: int, out_shape) -> np.ndarray:
    """Fold (N, C*k^3, P) gradients back onto the (unpadded) input shape."""
    n, c, d, h, w = x_shape
    do, ho, wo = out_shape
    dxp = np.zeros((n, c, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=dcol.dtype)
    dcol = dcol.reshape(n, c, k, k, k, do, ho, wo)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                dxp[:, :,
                    kd:kd + stride * (do - 1) + 1:stride,
                    kh:kh + stride * (ho - 1) + 1:stride,
                    kw:kw + stride * (wo - 1) + 1:stride] += dcol[:, :, kd, kh, kw]
    if pad == 0:
        return dxp
    return dxp[:, :, pad:-pad, pad:-pad, pad:-pad]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3D convolution, kernel 3 (zero padding 1) or kernel 1 (no padding).

    x: (N, Cin, D, H, W); weight: (Cout, Cin, k, k, k); bias: (Cout,).
    Stride 1 preserves spatial shape for k=3; stride 2 halves even dims.
    """
    n, cin, d, h, w = x.data.shape
    cout, cin_w, k = weight.data.shape[0], weight.data.shape[1], weight.data.shape[2]
    if cin != cin_w:
        raise ShapeMismatch(f"conv3d: input has {cin} channels, weight expects {cin_w}")
    if k not in (1, 3):
        raise ShapeMismatch(f"conv3d: kernel {k} unsupported")
    pad = 1 if k == 3 else 0
    out_sp = tuple(_conv_out_size(s, k, pad, stride) for s in (d, h, w))
    do, ho, wo = out_sp
    p = do * ho * wo

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    if k == 1 and stride == 1:
        col = x.data.reshape(n, cin, p)
    else:
        col = _im2col(xp, k, stride, out_sp)
    w_mat = weight.data.reshape(cout, cin * k ** 3)

    out_data = np.matmul(w_mat, col)          # (N, Cout, P)
    out_data += bias.data[:, None]
    out = Tensor(out_data.reshape(n, cout, do, ho, wo),
                 x.requires_grad or weight.requires_grad or bias.requires_grad,
                 (x, weight, bias))

    def _bw(g):
        go = g.reshape(n, cout, p)
        if weight.requires_grad or weight._parents:
            # (Cout, N*P) @ (N*P, C*k^3)
            dw = np.matmul(go.transpose(1, 0, 2).reshape(cout, n * p),
                           col.transpose(1, 0, 2).reshape(cin * k ** 3, n * p).T)
            weight._accum(dw.reshape(weight.data.shape))
        if bias.requires_grad or bias._parents:
            bias._accum(go.sum(axis=(0, 2)))
        if x.requires_grad or x._parents:
            dcol = np.matmul(w_mat.T, go)     # (N, C*k^3, P)
            if k == 1 and stride == 1:
                x._accum(dcol.reshape(x.data.shape))
            else:
                x._accum(_col2im(dcol, x.data.shape, k, pad, stride, out_sp))
    out._backward = _bw
    return out


# -- normalization -----------------------------------------------------------

def _normalize(x: Tensor, gain: Tensor, offset: Tensor, stat_axes: tuple,
               param_bshape: tuple, eps: float) -> Tensor:
    """Zero-mean unit-variance normalization over stat_axes, then affine."""
    mu = x.data.mean(axis=stat_axes, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=stat_axes, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    g_b = gain.data.reshape(param_bshape)
    out = Tensor(xhat * g_b + offset.data.reshape(param_bshape),
                 x.requires_grad or gain.requires_grad or offset.requires_grad,
                 (x, gain, offset))
    m = 1
    for a in stat_axes:
        m *= x.data.shape[a]

    def _bw(g):
        if gain.requires_grad or gain._parents:
            red = tuple(i for i in range(x.data.ndim) if param_bshape[i] == 1)
            gain._accum((g * xhat).sum(axis=red).reshape(gain.data.shape))
        if offset.requires_grad or offset._parents:
            red = tuple(i for i in range(x.data.ndim) if param_bshape[i] == 1)
            offset._accum(g.sum(axis=red).reshape(offset.data.shape))
        if x.requires_grad or x._parents:
            dxhat = g * g_b
            dvar = (dxhat * xc).sum(axis=stat_axes, keepdims=True) * (-0.5) * ivar ** 3
            dmu = (-ivar) * dxhat.sum(axis=stat_axes, keepdims=True) \
                + dvar * (-2.0 / m) * xc.sum(axis=stat_axes, keepdims=True)
            x._accum(dxhat * ivar + dvar * (2.0 / m) * xc + dmu / m)
    out._backward = _bw
    return out


def instance_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) standardization of spatial activations."""
    c = x.data.shape[1]
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    stat_axes = tuple(range(2, x.data.ndim))
    return _normalize(x, gain, offset, stat_axes, bshape, eps)


def batch_norm_train(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5):
    """Batch normalization over axis 0 of (N, F); returns (out, mean, var)."""
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    out = _normalize(x, gain, offset, (0,), (1, x.data.shape[1]), eps)
    return out, mu, var


def batch_norm_eval(x: Tensor, gain: Tensor, offset: Tensor,
                    mean: np.ndarray, var: np.ndarray, eps: float = 1e-5) -> Tensor:
    scale = gain.data / np.sqrt(var + eps)
    shift = offset.data - mean * scale
    out = Tensor(x.data * scale + shift,
                 x.requires_grad or gain.requires_grad or offset.requires_grad,
                 (x, gain, offset))

    def _bw(g):
        if x.requires_grad or x._parents:
            x._accum(g * scale)
        if gain.requires_grad or gain._parents:
            xhat = (x.data - mean) / np.sqrt(var + eps)
            gain._accum((g * xhat).sum(axis=0))
        if offset.requires_grad or offset._parents:
            offset._accum(g.sum(axis=0))
    out._backward = _bw
    return out


# -- activations and regularizers --------------------------------------------

def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, x.data * slope), x.requires_grad, (x,))

    def _bw(g):
        x._accum(np.where(pos, g, g * slope))
    out._backward = _bw
    return out


def dropout(x: Tensor, p: float, rng, active: bool) -> Tensor:
    """Inverted dropout: zero with prob p, scale survivors by 1/(1-p)."""
    if not active or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = Tensor(x.data * keep, x.requires_grad, (x,))

    def _bw(g):
        x._accum(g * keep)
    out._backward = _bw
    return out


def repeat_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat each voxel `factor` times along every spatial axis."""
    y = x.data
    for ax in range(2, x.data.ndim):
        y = np.repeat(y, factor, axis=ax)
    out = Tensor(y, x.requires_grad, (x,))
    n, c, d, h, w = x.data.shape

    def _bw(g):
        blocks = g.reshape(n, c, d, factor, h, factor, w, factor)
        x._accum(blocks.sum(axis=(3, 5, 7)))
    out._backward = _bw
    return out


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1),
                 any(t.requires_grad for t in tensors), tuple(tensors))
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

    def _bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=1)):
            if t.requires_grad or t._parents:
                t._accum(piece)
    out._backward = _bw
    return out


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1; per-voxel channel sums are 1."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, x.requires_grad, (x,))

    def _bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        x._accum(y * (g - dot))
    out._backward = _bw
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N, F) @ (F, O) + (O,)."""
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeMismatch(
            f"linear: input width {x.data.shape[1]} vs weight {weight.data.shape[0]}")
    out = Tensor(x.data @ weight.data + bias.data,
                 x.requires_grad or weight.requires_grad or bias.requires_grad,
                 (x, weight, bias))

    def _bw(g):
        if x.requires_grad or x._parents:
            x._accum(g @ weight.data.T)
        if weight.requires_grad or weight._parents:
            weight._accum(x.data.T @ g)
        if bias.requires_grad or bias._parents:
            bias._accum(g.sum(axis=0))
    out._backward = _bw
    return out
