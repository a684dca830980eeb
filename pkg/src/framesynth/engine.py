"""Minimal differentiable tensor core for frame-sequence models.

Everything is a rank-4 tensor laid out (n, c, h, w): n indexes frames in a
sequence (or a batch), c channels, h/w the spatial grid. The operator set is
exactly what the synthesis architecture needs: 2D convolution, leaky
rectifier, axis softmax, group normalization, elementwise arithmetic,
channel concatenation, 2x average pooling and 2x nearest upsampling, plus
reverse-mode gradients for all of it.

Determinism contracts, which several tests rely on:

* conv2d accumulates bias first, then one subtotal per kernel tap (ki, kj),
  each subtotal summed over input channels in ascending order. For small
  channel counts this is bit-identical to a plain scalar reference loop
  with the same grouping.
* Reductions across the frame axis (softmax normalizer, frame_sum) first
  sort the addends by value, so results are bit-stable under any
  permutation of the frames being reduced.
* No operation consults global RNG state; identical inputs give identical
  bits across runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64

# conv2d switches from the tap-einsum path to im2col+matmul above this
# input-channel count; the scalar-oracle bit equality is only promised for
# the small path.
_SMALL_CONV_IN_C = 8


def set_default_dtype(dtype) -> None:
    """Set the scalar width used for new tensors: float64 for verification
    and gradient checking, float32 for training."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A rank-4 array with optional gradient tracking.

    Data is immutable after creation by convention; only `grad` mutates.
    Tensors produced by operators keep references to their parents and a
    closure computing parent gradients, which is enough for one reverse
    pass from any scalar downstream.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple = (), grad_fn: Optional[Callable] = None,
                 op: str = "leaf"):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ValueError(f"tensor data must be rank 4 (n,c,h,w), got shape {data.shape}")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._grad_fn = grad_fn
        self._op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag}, op={self._op!r})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor in the engine's default dtype."""
    arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
    if arr.ndim != 4:
        raise ValueError(f"tensor data must be rank 4 (n,c,h,w), got shape {arr.shape}")
    return Tensor(arr, requires_grad=requires_grad)


def scalar(value: float) -> Tensor:
    return tensor(np.full((1, 1, 1, 1), value, dtype=_DEFAULT_DTYPE))


def _result(data, parents, grad_fn, op) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires,
                  parents=parents if requires else (),
                  grad_fn=grad_fn if requires else None, op=op)


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar: populate `grad` on every tensor that
    requires it. Repeated calls accumulate (grads add, never overwrite)."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen = set()
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = flows.get(id(parent))
            flows[id(parent)] = pg if acc is None else acc + pg


def _ordered_sum(arr: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    # value-sorted accumulation: bit-stable under permutation along `axis`
    return np.sort(arr, axis=axis).sum(axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# convolution

@dataclass
class ConvParams:
    """Weights of one 2D convolution: kernel (out_c, in_c, kh, kw), bias
    stored (1, out_c, 1, 1). Cross-correlation semantics, no kernel flip."""
    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        oc, _, kh, kw = self.kernel.shape
        if self.bias.shape != (1, oc, 1, 1):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match kernel out channels {oc}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad stride/padding ({self.stride}, {self.padding})")
        if kh != kw:
            raise ValueError(f"only square kernels supported, got {kh}x{kw}")

    @property
    def in_c(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_c(self) -> int:
        return self.kernel.shape[0]


def _im2col(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + (oh - 1) * stride + 1:stride,
                                    kj:kj + (ow - 1) * stride + 1:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """2D cross-correlation over each frame, differentiable in the input,
    kernel and bias."""
    kernel, bias, stride, padding = params.kernel, params.bias, params.stride, params.padding
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if c != ic:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} vs kernel shape {kernel.shape}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d spatial underflow: input shape {x.shape}, kernel {kh}x{kw}, "
            f"padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kd = kernel.data
    out = np.empty((n, oc, oh, ow), dtype=x.data.dtype)
    out[:] = bias.data.reshape(1, oc, 1, 1)
    if ic <= _SMALL_CONV_IN_C:
        for ki in range(kh):
            for kj in range(kw):
                xs = xp[:, :, ki:ki + (oh - 1) * stride + 1:stride,
                        kj:kj + (ow - 1) * stride + 1:stride]
                out += np.einsum("nihw,oi->nohw", xs, kd[:, :, ki, kj])
    else:
        cols = _im2col(xp, kh, kw, oh, ow, stride)
        out += np.matmul(kd.reshape(oc, -1), cols).reshape(n, oc, oh, ow)

    def grad_fn(g):
        dx = dk = db = None
        if kernel.requires_grad:
            dk = _conv2d_grad_kernel(g, xp, kernel.shape, stride)
        if x.requires_grad:
            dx = _conv2d_grad_input(g, xp, kd, x.shape, stride, padding)
        if bias.requires_grad:
            db = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return dx, dk, db

    return _result(out, (x, kernel, bias), grad_fn, "conv2d")


def _conv2d_grad_kernel(g: np.ndarray, xp: np.ndarray, kshape, stride: int) -> np.ndarray:
    n, oc, oh, ow = g.shape
    _, _, kh, kw = kshape
    cols = _im2col(xp, kh, kw, oh, ow, stride)
    g2 = g.reshape(n, oc, oh * ow)
    return np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kshape)


def _conv2d_grad_input(g: np.ndarray, xp: np.ndarray, kd: np.ndarray, xshape,
                       stride: int, padding: int) -> np.ndarray:
    n, oc, oh, ow = g.shape
    _, ic, kh, kw = kd.shape
    h, w = xshape[2], xshape[3]
    colsg = np.matmul(kd.reshape(oc, -1).T, g.reshape(n, oc, oh * ow))
    colsg = colsg.reshape(n, ic, kh, kw, oh, ow)
    dxp = np.zeros_like(xp)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki:ki + (oh - 1) * stride + 1:stride,
                kj:kj + (ow - 1) * stride + 1:stride] += colsg[:, :, ki, kj]
    return dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp


# ---------------------------------------------------------------------------
# pointwise and normalization

# when set, called with each leaky_relu branch mask; finite-difference
# checkers use it to detect evaluations that straddle the kink
_LEAKY_SIGN_HOOK = None


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """x for x >= 0, slope*x otherwise; the subgradient at 0 takes the
    negative-branch slope."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must be in (0,1), got {slope}")
    mask = x.data >= 0
    if _LEAKY_SIGN_HOOK is not None:
        _LEAKY_SIGN_HOOK(mask)
    out = np.where(mask, x.data, x.data * x.data.dtype.type(slope))

    def grad_fn(g):
        return (np.where(x.data > 0, g, g * g.dtype.type(slope)),)

    return _result(out, (x,), grad_fn, "leaky_relu")


def softmax_along(x: Tensor, axis: int) -> Tensor:
    """Softmax along one axis, max-shifted for stability. The normalizer is
    accumulated in value order, so outputs are bit-stable under permutation
    along the softmax axis. Entries of -inf get exact weight 0."""
    if not 0 <= axis <= 3:
        raise ValueError(f"axis must be in 0..3, got {axis}")
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    denom = _ordered_sum(e, axis=axis, keepdims=True)
    y = e / denom

    def grad_fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _result(y, (x,), grad_fn, "softmax")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """Normalize each (frame, channel-group) slice to zero mean / unit
    variance, then scale and shift per channel."""
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ValueError(
            f"gamma/beta must be (1,{c},1,1), got {gamma.shape} and {beta.shape}")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out = gamma.data * xhat + beta.data

    def grad_fn(g):
        dgamma = dbeta = dx = None
        if gamma.requires_grad:
            dgamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape)
        if beta.requires_grad:
            dbeta = g.sum(axis=(0, 2, 3)).reshape(beta.shape)
        if x.requires_grad:
            dxhat = (g * gamma.data).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = (dxhat * xh).mean(axis=2, keepdims=True)
            dx = (inv * (dxhat - m1 - xh * m2)).reshape(n, c, h, w)
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), grad_fn, "group_norm")


# ---------------------------------------------------------------------------
# resampling and shape ops

def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    xv = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = xv.mean(axis=(3, 5))

    def grad_fn(g):
        gq = g.dtype.type(0.25) * g
        return (np.repeat(np.repeat(gq, 2, axis=2), 2, axis=3),)

    return _result(out, (x,), grad_fn, "avg_pool2")


def upsample2_nearest(x: Tensor) -> Tensor:
    """2x nearest-neighbor upsampling."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape

    def grad_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), grad_fn, "upsample2")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along the frame axis (0) or channel axis (1)."""
    if axis not in (0, 1):
        raise ValueError(f"concat axis must be 0 or 1, got {axis}")
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if [d for i, d in enumerate(s) if i != axis] != [d for i, d in enumerate(ref) if i != axis]:
            raise ValueError(f"concat shape mismatch along axis {axis}: {shapes}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        slicer = [slice(None)] * 4
        grads = []
        for i in range(len(sizes)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _result(out, tuple(tensors), grad_fn, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along axis 0 or 1."""
    if axis not in (0, 1):
        raise ValueError(f"narrow axis must be 0 or 1, got {axis}")
    if start < 0 or start + length > x.shape[axis]:
        raise ValueError(
            f"narrow [{start}:{start + length}] out of range for shape {x.shape} axis {axis}")
    slicer = [slice(None)] * 4
    slicer[axis] = slice(start, start + length)
    out = x.data[tuple(slicer)].copy()

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        dx[tuple(slicer)] = g
        return (dx,)

    return _result(out, (x,), grad_fn, "narrow")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may have a single channel, which is
    broadcast across the other's channels."""
    if a.shape != b.shape:
        na, ca, ha, wa = a.shape
        nb, cb, hb, wb = b.shape
        if not ((na, ha, wa) == (nb, hb, wb) and (ca == 1 or cb == 1)):
            raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def grad_fn(g):
        da = g * b.data
        db = g * a.data
        if da.shape != a.shape:
            da = da.sum(axis=1, keepdims=True)
        if db.shape != b.shape:
            db = db.sum(axis=1, keepdims=True)
        return da, db

    return _result(out, (a, b), grad_fn, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = x.data.dtype.type(s)
    return _result(x.data * s, (x,), lambda g: (g * s,), "scale")


def add_array(x: Tensor, arr: np.ndarray) -> Tensor:
    """Add a constant (non-tracked) array; used for additive logit masks,
    so -inf entries are allowed."""
    out = x.data + arr
    return _result(out, (x,), lambda g: (g,), "add_array")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def grad_fn(g):
        return (g * (0.5 / out),)

    return _result(out, (x,), grad_fn, "sqrt")


# ---------------------------------------------------------------------------
# reductions

def frame_sum(x: Tensor) -> Tensor:
    """Sum over the frame axis to (1,c,h,w), accumulating in value order so
    the result is bit-stable under frame permutation."""
    out = _ordered_sum(x.data, axis=0, keepdims=True)

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), grad_fn, "frame_sum")


def sum_per_frame(x: Tensor) -> Tensor:
    """Reduce each frame to one scalar: (n,c,h,w) -> (n,1,1,1)."""
    out = x.data.sum(axis=(1, 2, 3), keepdims=True)

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), grad_fn, "sum_per_frame")


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum().reshape(1, 1, 1, 1)

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), grad_fn, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    inv = x.data.dtype.type(1.0 / x.numel())
    out = (x.data.sum() * inv).reshape(1, 1, 1, 1)

    def grad_fn(g):
        return (np.broadcast_to(g * inv, x.shape).copy(),)

    return _result(out, (x,), grad_fn, "mean_all")
