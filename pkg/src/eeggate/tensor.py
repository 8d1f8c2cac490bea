"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive the pipeline needs is implemented here as a function that
returns a new :class:`Tensor` holding a backward closure.  Calling
``Tensor.backward()`` builds a :class:`Tape` (topological order of the
graph reachable from the loss) and runs the closures in reverse.

Tape policy: a graph is built fresh on every forward pass and a Tape may be
run once; after ``backward`` the internal edges of visited nodes are
released so large intermediates can be freed, while leaf ``grad`` buffers
accumulate (call :func:`zero_grads` between steps).
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError, LengthError


DEFAULT_DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (
                np.float32,
                np.float64,
            ) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph wiring ---------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if not g.flags.owndata else g
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        Tape.from_root(self).backward()

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


class Tape:
    """Topologically ordered list of graph nodes reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes  # inputs of nodes[i] appear before index i

    @staticmethod
    def from_root(root: Tensor) -> "Tape":
        if root.size != 1:
            raise ContractError("backward requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return Tape(order)

    def backward(self) -> None:
        root = self.nodes[-1]
        root._accumulate(np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node._backward is not None:
                node._backward(node.grad)
                # release edges and non-leaf grads so intermediates free early
                node._backward = None
                node._parents = ()
                node.grad = None
        self.nodes = []


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# -- broadcasting helpers ---------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _lift(a)

        def back(g, a=a):
            a._accumulate(g)

        return _make(a.data + b, (a,), back)
    a, b = _lift(a), _lift(b)

    def back(g, a=a, b=b):
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            if ga is g and b.requires_grad:
                ga = g.copy()  # avoid both parents holding the same buffer
            a._accumulate(ga)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        b = _lift(b)

        def back(g, b=b):
            b._accumulate(-g)

        return _make(a - b.data, (b,), back)
    a, b = _lift(a), _lift(b)

    def back(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _lift(a)

        def back(g, a=a, b=b):
            a._accumulate(g * b)

        return _make(a.data * b, (a,), back)
    a, b = _lift(a), _lift(b)

    def back(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return mul(a, 1.0 / b)
    a, b = _lift(a), _lift(b)

    def back(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), back)


def elementwise_add(a, b) -> Tensor:
    return add(a, b)


def elementwise_mul(a, b) -> Tensor:
    return mul(a, b)


def power(x: Tensor, p: float) -> Tensor:
    """x ** p with scalar exponent."""
    x = _lift(x)
    out = x.data ** p

    def back(g, x=x, p=p):
        x._accumulate(g * p * x.data ** (p - 1.0))

    return _make(out, (x,), back)


def sqrt(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.sqrt(x.data)

    def back(g, x=x, out=out):
        x._accumulate(g * (0.5 / out))

    return _make(out, (x,), back)


def exp(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.exp(x.data)

    def back(g, x=x, out=out):
        x._accumulate(g * out)

    return _make(out, (x,), back)


def clamp_min(x: Tensor, m: float) -> Tensor:
    x = _lift(x)
    out = np.maximum(x.data, m)

    def back(g, x=x, m=m):
        x._accumulate(g * (x.data >= m))

    return _make(out, (x,), back)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _lift(x)
    out = np.clip(x.data, lo, hi)

    def back(g, x=x, lo=lo, hi=hi):
        x._accumulate(g * ((x.data >= lo) & (x.data <= hi)))

    return _make(out, (x,), back)


# -- shape ops ---------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = _lift(x)
    old = x.data.shape

    def back(g, x=x, old=old):
        x._accumulate(g.reshape(old))

    return _make(x.data.reshape(shape), (x,), back)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _lift(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def back(g, x=x, inv=inv):
        x._accumulate(np.ascontiguousarray(g.transpose(inv)))

    return _make(x.data.transpose(axes), (x,), back)


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    if axes is not None:
        axes = tuple(sorted(axes))
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g, x=x, axes=axes, keepdims=keepdims):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return _make(out, (x,), back)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axes``; reduced axes removed unless keepdims.

    ``axes`` given as an empty set is a no-op and returns the input.
    """
    x = _lift(x)
    if x.size == 0:
        raise DomainError("mean of an empty tensor")
    if axes is not None:
        axes = tuple(sorted(axes))
        if len(axes) == 0:
            return x
        bad = [a for a in axes if a < 0 or a >= x.ndim]
        if bad:
            raise DimensionError(f"axes {bad} invalid for shape {x.shape}")
        n = int(np.prod([x.shape[a] for a in axes]))
    else:
        n = x.size
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g, x=x, axes=axes, keepdims=keepdims, n=n):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.data.shape) / n)

    return _make(out, (x,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")

    def back(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x (B,D), w (D,K), b (K)."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense shapes {x.shape} x {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense bias shape {b.shape}")
    out = x.data @ w.data + b.data

    def back(g, x=x, w=w, b=b):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(out, (x, w, b), back)


# -- activations -------------------------------------------------------------

_ACTIVATIONS = ("elu", "sigmoid", "softplus", "square", "log-clamped")
LOG_CLAMP_FLOOR = 1e-7


def activation(kind: str, x: Tensor) -> Tensor:
    x = _lift(x)
    if kind == "elu":
        pos = x.data >= 0
        out = np.where(pos, x.data, np.expm1(np.minimum(x.data, 0.0)))

        def back(g, x=x, pos=pos, out=out):
            x._accumulate(g * np.where(pos, 1.0, out + 1.0))

    elif kind == "sigmoid":
        out = 1.0 / (1.0 + np.exp(-x.data))

        def back(g, x=x, out=out):
            x._accumulate(g * out * (1.0 - out))

    elif kind == "softplus":
        out = np.logaddexp(0.0, x.data)

        def back(g, x=x):
            x._accumulate(g / (1.0 + np.exp(-x.data)))

    elif kind == "square":
        out = x.data * x.data

        def back(g, x=x):
            x._accumulate(g * (2.0 * x.data))

    elif kind == "log-clamped":
        clamped = np.maximum(x.data, LOG_CLAMP_FLOOR)
        out = np.log(clamped)

        def back(g, x=x, clamped=clamped):
            x._accumulate(g * (x.data >= LOG_CLAMP_FLOOR) / clamped)

    else:
        raise DomainError(f"unknown activation {kind!r}; choose from {_ACTIVATIONS}")
    return _make(out, (x,), back)


def elu(x):
    return activation("elu", x)


def sigmoid(x):
    return activation("sigmoid", x)


def softplus(x):
    return activation("softplus", x)


def square(x):
    return activation("square", x)


def log_clamped(x):
    return activation("log-clamped", x)


# -- convolution and pooling --------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Stack shifted views as (Cin*kh*kw, B*Ho*Wo); each row is one cheap slice copy."""
    b, c, h, w = xp.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((c * kh * kw, b, ho, wo), dtype=xp.dtype)
    idx = 0
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                cols[idx] = xp[:, ci, i:i + ho, j:j + wo]
                idx += 1
    return cols.reshape(c * kh * kw, b * ho * wo)


def conv2d(x: Tensor, k: Tensor, padding: str = "valid") -> Tensor:
    """2-D cross-correlation, stride 1, x (B,Cin,H,W), k (Cout,Cin,kh,kw)."""
    x, k = _lift(x), _lift(k)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    bsz, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if cin != kcin:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if padding == "same":
        ph, pw = kh - 1, kw - 1
        pads = ((0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
        xp = np.pad(x.data, pads)
    elif padding == "valid":
        pads = None
        xp = x.data
    else:
        raise DomainError(f"unknown padding {padding!r}")
    if kh > xp.shape[2] or kw > xp.shape[3]:
        raise LengthError(f"kernel ({kh},{kw}) larger than padded input {xp.shape[2:]}")
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1

    kmat = k.data.reshape(cout, cin * kh * kw)
    cols = _im2col(xp, kh, kw)
    # out as (Cout,B,Ho,Wo) view-transposed to (B,Cout,Ho,Wo): no big copy.
    out = (kmat @ cols).reshape(cout, bsz, ho, wo).transpose(1, 0, 2, 3)
    if not k.requires_grad:
        cols = None  # nothing downstream needs it; free the biggest buffer now

    def back(g, x=x, k=k, kmat=kmat, cols=cols, pads=pads, shape_xp=xp.shape):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, bsz * ho * wo)
        if k.requires_grad:
            k._accumulate((gm @ cols.T).reshape(k.data.shape))
        if x.requires_grad:
            dcols = (kmat.T @ gm).reshape(cin, kh, kw, bsz, ho, wo)
            if (kh == 1 or ho == 1) and (kw == 1 or wo == 1):
                # shifted slices are disjoint: the scatter is a rearrangement
                dxp = np.ascontiguousarray(
                    dcols.transpose(3, 0, 1, 4, 2, 5).reshape(bsz, cin, kh * ho, kw * wo)
                )
            else:
                dxp = np.zeros(shape_xp, dtype=x.data.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + ho, j:j + wo] += dcols[:, i, j].transpose(1, 0, 2, 3)
            if pads is not None:
                (_, _), (_, _), (pt, pb), (pl, pr) = pads
                dxp = dxp[:, :, pt:shape_xp[2] - pb, pl:shape_xp[3] - pr]
            x._accumulate(dxp)

    return _make(out, (x, k), back)


def avg_pool(x: Tensor, window: int, stride: int) -> Tensor:
    """Mean pooling along the last axis."""
    x = _lift(x)
    n = x.shape[-1]
    if window < 1 or stride < 1:
        raise DomainError("window and stride must be positive")
    if window > n:
        raise LengthError(f"pool window {window} exceeds axis length {n}")
    win = sliding_window_view(x.data, window, axis=-1)[..., ::stride, :]
    out = win.mean(axis=-1)
    lout = out.shape[-1]

    def back(g, x=x, window=window, stride=stride, lout=lout):
        dx = np.zeros_like(x.data)
        gw = g / window
        span = stride * (lout - 1) + 1
        for o in range(window):
            dx[..., o:o + span:stride] += gw
        x._accumulate(dx)

    return _make(out, (x,), back)


# -- dropout ------------------------------------------------------------------

def dropout_rng(seed: int, epoch: int, batch: int, layer: int) -> np.random.Generator:
    """Counter-based generator: same key, same mask, independent of call order."""
    mask32 = (1 << 32) - 1
    key = np.array(
        [
            ((seed & mask32) << 32) | (epoch & mask32),
            ((batch & mask32) << 32) | (layer & mask32),
        ],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def dropout(x: Tensor, p: float, mode: str, key: tuple[int, int, int, int]) -> Tensor:
    if not (0.0 <= p < 1.0):
        raise DomainError(f"dropout p={p} outside [0,1)")
    if mode == "eval" or p == 0.0:
        return _lift(x)
    if mode != "train":
        raise DomainError(f"unknown mode {mode!r}")
    x = _lift(x)
    rng = dropout_rng(*key)
    scale = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(x.data.dtype, copy=False)
    out = x.data * scale

    def back(g, x=x, scale=scale):
        x._accumulate(g * scale)

    return _make(out, (x,), back)


# -- losses and similarity -----------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy with max-subtraction stabilization.

    logits (B,K) or (K,); labels int or int array in [0,K).
    """
    logits = _lift(logits)
    squeeze = logits.ndim == 1
    z = logits.data.reshape(1, -1) if squeeze else logits.data
    if z.ndim != 2:
        raise DimensionError("logits must be 1-D or 2-D")
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    bsz, k = z.shape
    if lab.shape != (bsz,):
        raise DimensionError(f"labels shape {lab.shape} for batch {bsz}")
    if lab.min() < 0 or lab.max() >= k:
        raise DomainError(f"label outside [0,{k})")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    loss = float(np.mean(lse - zs[np.arange(bsz), lab]))

    def back(g, logits=logits, zs=zs, lab=lab, bsz=bsz, squeeze=squeeze):
        p = np.exp(zs - np.log(np.exp(zs).sum(axis=1, keepdims=True)))
        p[np.arange(bsz), lab] -= 1.0
        p *= float(g) / bsz
        logits._accumulate(p.reshape(logits.data.shape) if squeeze else p)

    return _make(loss, (logits,), back)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine of two 1-D vectors with an eps norm floor, clamped to [-1,1]."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape or a.shape[0] < 1:
        raise DimensionError(f"cosine_similarity shapes {a.shape}, {b.shape}")
    dot = reduce_sum(mul(a, b))
    na = clamp_min(sqrt(reduce_sum(mul(a, a))), eps)
    nb = clamp_min(sqrt(reduce_sum(mul(b, b))), eps)
    return clip(div(dot, mul(na, nb)), -1.0, 1.0)


def linear_resample(v: Tensor, length: int) -> Tensor:
    """Linear interpolation of the last axis onto ``length`` samples.

    Endpoints are preserved exactly; length-1 inputs broadcast their value.
    """
    v = _lift(v)
    m = v.shape[-1]
    if m < 1 or length < 1:
        raise DomainError("linear_resample needs non-empty axes")
    w = np.zeros((length, m), dtype=v.data.dtype)
    if m == 1:
        w[:, 0] = 1.0
    elif length == 1:
        w[0, 0] = 1.0
    else:
        pos = (np.arange(length) * (m - 1)) / (length - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, m - 1)
        f = pos - lo
        w[np.arange(length), lo] += 1.0 - f
        w[np.arange(length), hi] += f
    out = v.data @ w.T

    def back(g, v=v, w=w):
        v._accumulate(g @ w)

    return _make(out, (v,), back)


def node_mix(s: Tensor, x: Tensor) -> Tensor:
    """Apply a node-mixing matrix over the electrode axis: out[...,i,t] = sum_j s[i,j] x[...,j,t]."""
    s, x = _lift(s), _lift(x)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError("node_mix matrix must be square")
    if x.ndim != 4 or x.shape[2] != s.shape[0]:
        raise DimensionError(f"node_mix axis mismatch: {x.shape} vs {s.shape}")
    out = np.matmul(s.data, x.data)  # (C,C) @ (B,F,C,T), batched over B,F

    def back(g, s=s, x=x):
        if s.requires_grad:
            nn, tt = x.shape[2], x.shape[3]
            g2 = g.reshape(-1, nn, tt)
            x2 = x.data.reshape(-1, nn, tt)
            ds = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)
            s._accumulate(ds.astype(s.data.dtype, copy=False))
        if x.requires_grad:
            x._accumulate(np.matmul(s.data.T, g))

    return _make(out, (s, x), back)


# -- batch normalization --------------------------------------------------------

class BatchNormState:
    """Learnable affine plus running statistics for one channel axis."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.gamma.size

    def astype(self, dtype) -> "BatchNormState":
        self.gamma.data = self.gamma.data.astype(dtype, copy=False)
        self.beta.data = self.beta.data.astype(dtype, copy=False)
        self.running_mean = self.running_mean.astype(dtype, copy=False)
        self.running_var = self.running_var.astype(dtype, copy=False)
        return self


def batch_norm(x: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Normalize (B,C,H,W) per channel over (B,H,W); affine scale/shift."""
    x = _lift(x)
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise DimensionError(f"batch_norm expects (B,{state.channels},H,W), got {x.shape}")
    cshape = (1, -1, 1, 1)
    xd = x.data
    dt = xd.dtype
    if mode == "train":
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise DomainError("batch_norm train mode needs >= 2 values per channel")
        # single-pass sums in float64 for stable statistics at any compute dtype
        s1 = np.einsum("bchw->c", xd, dtype=np.float64)
        s2 = np.einsum("bchw,bchw->c", xd, xd, dtype=np.float64)
        mean = s1 / n
        var = np.maximum(s2 / n - mean * mean, 0.0)
        m = state.momentum
        state.running_mean = ((1.0 - m) * state.running_mean + m * mean).astype(
            state.running_mean.dtype, copy=False
        )
        state.running_var = ((1.0 - m) * state.running_var + m * var).astype(
            state.running_var.dtype, copy=False
        )
    elif mode == "eval":
        mean = np.asarray(state.running_mean, dtype=np.float64)
        var = np.asarray(state.running_var, dtype=np.float64)
    else:
        raise DomainError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    # fused affine: out = x * a + b with a = gamma*inv, b = beta - mean*a
    a = (state.gamma.data * inv).astype(dt, copy=False)
    b = (state.beta.data - mean * state.gamma.data * inv).astype(dt, copy=False)
    out = xd * a.reshape(cshape)
    out += b.reshape(cshape)
    gamma, beta = state.gamma, state.beta

    def back(g, x=x, gamma=gamma, beta=beta, mean=mean, inv=inv, mode=mode):
        xn = x.data * inv.reshape(cshape).astype(x.data.dtype, copy=False)
        xn -= (mean * inv).reshape(cshape).astype(x.data.dtype, copy=False)
        gsum = np.einsum("bchw->c", g, dtype=np.float64)
        if beta.requires_grad:
            beta._accumulate(gsum.astype(gamma.data.dtype))
        gxn = np.einsum("bchw,bchw->c", g, xn, dtype=np.float64)
        if gamma.requires_grad:
            gamma._accumulate(gxn.astype(gamma.data.dtype))
        if x.requires_grad:
            gi = (gamma.data * inv).reshape(cshape).astype(x.data.dtype, copy=False)
            if mode == "train":
                n = x.shape[0] * x.shape[2] * x.shape[3]
                # dx = gi * (g - gsum/n - xn * gxn/n), built in place on xn
                xn *= (gxn / n).reshape(cshape).astype(x.data.dtype, copy=False)
                xn += (gsum / n).reshape(cshape).astype(x.data.dtype, copy=False)
                xn -= g
                xn *= gi
                np.negative(xn, out=xn)
                x._accumulate(xn)
            else:
                x._accumulate(gi * g)

    return _make(out, (x, gamma, beta), back)


# -- gradient checking ------------------------------------------------------------

def check_gradients(f, x0: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor; relative error is
    |analytic - numeric| / max(1, |analytic|) per coordinate.
    """
    x0 = np.array(x0, dtype=np.float64)  # private copy; perturbed in place below
    x = Tensor(x0, requires_grad=True)
    loss = f(x)
    loss.backward()
    ga = x.grad.copy()
    gn = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gn_flat = gn.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(x0)).item()
        flat[i] = orig - step
        lo = f(Tensor(x0)).item()
        flat[i] = orig
        gn_flat[i] = (hi - lo) / (2.0 * step)
    return float(np.max(np.abs(ga - gn) / np.maximum(1.0, np.abs(ga))))


# -- parameter serialization --------------------------------------------------------

PARAM_MAGIC = b"PARAMS01"


def encode_params(named: Sequence[tuple[str, Tensor]]) -> tuple[list[dict], bytes]:
    manifest = []
    chunks = []
    offset = 0
    for name, t in named:
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    return manifest, b"".join(chunks)


def decode_params(manifest: list[dict], blob: bytes) -> dict[str, np.ndarray]:
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            from .errors import TruncatedFileError

            raise TruncatedFileError(f"parameter blob ends before {entry['name']}")
        out[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).copy()
    return out


def save_params(path, named: Sequence[tuple[str, Tensor]]) -> None:
    manifest, blob = encode_params(named)
    header = json.dumps({"params": manifest}).encode()
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob)


def load_params(path) -> dict[str, np.ndarray]:
    from .errors import BadMagicError, TruncatedFileError

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != PARAM_MAGIC:
        raise BadMagicError("not a parameter file")
    if len(raw) < 12:
        raise TruncatedFileError("missing header length")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise TruncatedFileError("truncated header")
    header = json.loads(raw[12:12 + hlen])
    return decode_params(header["params"], raw[12 + hlen:])
