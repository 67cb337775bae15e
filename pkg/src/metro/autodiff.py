"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Only the operations the mesh regressor needs are provided. Every op builds
its output through :func:`_node`, which records the parents and a closure
mapping the output gradient to one gradient per parent. ``Tensor.backward``
walks the recorded graph in reverse creation order, which is an exact
reverse topological order because a node is always created after its inputs.

Reductions accumulate in float64 even when the tensors are float32.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, ValidationError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_SEQ = itertools.count()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValidationError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation, parameter updates)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense real array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "retain_grad",
                 "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or (data.dtype if isinstance(data, np.ndarray)
                          and data.dtype in (np.float32, np.float64)
                          else _DEFAULT_DTYPE)
        self.data = np.asarray(data, dtype=dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.retain_grad = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the functional ops below
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if not self.requires_grad:
            raise ValidationError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in nodes:  # already sorted newest first
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node.retain_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"internal: gradient shape {pg.shape} != tensor shape {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        return False
    return True


def _sum64(x: np.ndarray, axis, keepdims: bool = False) -> np.ndarray:
    return np.add.reduce(x, axis=axis, dtype=np.float64, keepdims=keepdims)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast (bias rows, per-sample offsets)."""
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: cannot combine shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"sub: cannot combine shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one side may be a broadcast row-wise factor."""
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: cannot combine shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c_ = a.dtype.type(c)

    def backward(g):
        return (g * c_,)

    return _node(a.data * c_, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = x * x
    inner *= k
    inner += 1
    inner *= x
    inner *= c
    th = np.tanh(inner, out=inner)
    out = th + 1
    out *= x
    out *= x.dtype.type(0.5)

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3k x^2)
        d = x * x
        d *= 3 * k
        d += 1
        d *= c
        d *= x
        d *= 1 - th * th
        d += 1 + th
        d *= x.dtype.type(0.5)
        d *= g
        return (d,)

    return _node(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    x = a.data
    pos = x > 0

    def backward(g):
        return (g * pos,)

    return _node(np.where(pos, x, 0).astype(x.dtype, copy=False), (a,), backward)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x)

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * sig,)

    return _node(out.astype(x.dtype, copy=False), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out ** 2),)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    ``a`` may be 2-D with ``b`` batched (constant regressor times vertices)
    or the other way round (token rows times a weight matrix).
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}")
    if not _broadcast_ok(a.shape[:-2], b.shape[:-2]):
        raise ShapeError(f"matmul: batch extents disagree for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` applied to every row of ``x`` (shape ``(..., d_in)``)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    flat = xd.reshape(-1, xd.shape[-1])
    out = flat @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = flat.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = _sum64(g2, 0).astype(g.dtype) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax_rows: NaN in input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = (e / _sum64(e, -1, keepdims=True)).astype(x.dtype, copy=False)

    def backward(g):
        dot = _sum64(g * p, -1, keepdims=True).astype(x.dtype, copy=False)
        return (p * (g - dot),)

    return _node(p, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = a.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {a.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ValidationError("layer_norm: eps must be positive")
    x = a.data
    dt = x.dtype
    mu = (_sum64(x, -1, keepdims=True) / d).astype(dt)
    xc = x - mu
    var = (_sum64(xc * xc, -1, keepdims=True) / d).astype(dt)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        ggain = _sum64((g * xhat).reshape(-1, d), 0).astype(dt) if gain.requires_grad else None
        gbias = _sum64(g.reshape(-1, d), 0).astype(dt) if bias.requires_grad else None
        gx = None
        if a.requires_grad:
            gh = g * gain.data
            m1 = (_sum64(gh, -1, keepdims=True) / d).astype(dt)
            m2 = (_sum64(gh * xhat, -1, keepdims=True) / d).astype(dt)
            gx = inv * (gh - m1 - xhat * m2)
        return gx, ggain, gbias

    return _node(out, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# shape manipulation

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        idx = [slice(None)] * nd
        res = []
        for i in range(len(tensors)):
            idx[ax] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(idx)])
        return tuple(res)

    return _node(out, tuple(tensors), backward)


def slice_(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(a.data[idx], (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _node(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """``(..., d)`` -> ``(..., n, d)`` by copying the vector into ``n`` rows."""
    out = np.repeat(a.data[..., None, :], n, axis=-2)

    def backward(g):
        return (_sum64(g, -2).astype(g.dtype),)

    return _node(out, (a,), backward)


def mask_rows(q: Tensor, mask: np.ndarray, token: Tensor) -> Tensor:
    """Replace the rows of ``q`` flagged in ``mask`` by ``token``.

    ``q`` is ``(..., n, d)``, ``mask`` boolean ``(..., n)``, ``token`` ``(d,)``.
    Masked rows pass no gradient to ``q``; ``token`` receives the sum of the
    gradients of every masked row.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != q.shape[:-1] or token.shape != q.shape[-1:]:
        raise ShapeError(f"mask_rows: query {q.shape}, mask {mask.shape}, token {token.shape}")
    out = np.where(mask[..., None], token.data, q.data)

    def backward(g):
        gq = np.where(mask[..., None], 0, g).astype(g.dtype, copy=False)
        gt = _sum64(g[mask], 0).astype(g.dtype) if mask.any() else np.zeros_like(token.data)
        return gq, gt

    return _node(out, (q, token), backward)


# ---------------------------------------------------------------------------
# reductions

def sum_(a: Tensor) -> Tensor:
    def backward(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return _node(np.asarray(_sum64(a.data, None), dtype=a.dtype), (a,), backward)


def mean(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out = (_sum64(a.data, axis) / n).astype(a.dtype)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / a.dtype.type(n), a.shape).copy(),)

    return _node(out, (a,), backward)


def mean_pool(a: Tensor) -> Tensor:
    """Average over the row axis: ``(..., n, d)`` -> ``(..., d)``."""
    return mean(a, axis=-2)


def l1_mean(pred: Tensor, gt, weights=None) -> Tensor:
    """Per-row L1 norm of ``pred - gt`` averaged over rows and samples.

    For ``(n, c)`` inputs this is ``1/n * sum_i ||pred_i - gt_i||_1``. A
    leading batch axis is averaged too, with optional per-sample
    ``weights`` (the availability flags). The subgradient at a tie is 0.
    """
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"l1_mean: prediction {pred.shape} vs target {gt.shape}")
    if pred.ndim < 2:
        raise ShapeError(f"l1_mean: expected (..., n, c), got {pred.shape}")
    diff = pred.data - gt
    per_row = _sum64(np.abs(diff), -1)
    n_rows = pred.shape[-2]
    batch_shape = pred.shape[:-2]
    n_batch = int(np.prod(batch_shape)) if batch_shape else 1
    if weights is None:
        w = np.ones(batch_shape)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), batch_shape)
    per_sample = _sum64(per_row, -1) / n_rows
    value = _sum64(per_sample * w, None) / n_batch

    def backward(g):
        coef = (float(g) * w / (n_rows * n_batch))[..., None, None]
        return (np.sign(diff) * coef.astype(pred.dtype),)

    return _node(np.asarray(value, dtype=pred.dtype), (pred,), backward)


# ---------------------------------------------------------------------------
# attention

def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int):
    """Scaled dot-product self-attention with ``heads`` heads.

    ``q``, ``k``, ``v`` are ``(B, n, d)``. Returns the ``(B, n, d)`` context
    tensor and the ``(B, heads, n, n)`` probability array. The work is done
    one sample at a time, which keeps each ``heads x n x n`` slab in cache
    and fixes the reduction order.
    """
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 3:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    B, n, d = q.shape
    if heads < 1 or d % heads:
        raise ShapeError(f"attention: {heads} heads do not divide width {d}")
    dh = d // heads
    dt = q.dtype
    sc = dt.type(1.0 / math.sqrt(dh))

    def split(x):
        return x.reshape(B, n, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    qs = qh * sc
    probs = np.empty((B, heads, n, n), dtype=dt)
    ctx = np.empty((B, heads, n, dh), dtype=dt)
    for b in range(B):
        s = probs[b]
        np.matmul(qs[b], kh[b].swapaxes(-1, -2), out=s)
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        np.matmul(s, vh[b], out=ctx[b])
    out = ctx.transpose(0, 2, 1, 3).reshape(B, n, d)

    def backward(g):
        gh = split(g)
        gq = np.empty_like(qh)
        gk = np.empty_like(kh)
        gv = np.empty_like(vh)
        dp = np.empty((heads, n, n), dtype=dt)
        for b in range(B):
            p = probs[b]
            np.matmul(gh[b], vh[b].swapaxes(-1, -2), out=dp)
            # row-wise <dp, p> equals <g_ctx, ctx>: an (n, dh) product instead of (n, n)
            c = np.einsum("hnd,hnd->hn", gh[b], ctx[b])[..., None]
            dp -= c
            dp *= p
            np.matmul(dp, kh[b], out=gq[b])
            gq[b] *= sc
            np.matmul(dp.swapaxes(-1, -2), qs[b], out=gk[b])
            np.matmul(p.swapaxes(-1, -2), gh[b], out=gv[b])

        def merge(x):
            return x.transpose(0, 2, 1, 3).reshape(B, n, d)

        return merge(gq), merge(gk), merge(gv)

    return _node(out, (q, k, v), backward), probs


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(B, n, d)`` -> ``(B, heads, n, d/heads)``; composable reference path."""
    B, n, d = x.shape
    if d % heads:
        raise ShapeError(f"split_heads: {heads} heads do not divide width {d}")
    return swapaxes(reshape(x, (B, n, heads, d // heads)), 1, 2)


def merge_heads(x: Tensor) -> Tensor:
    B, h, n, dh = x.shape
    return reshape(swapaxes(x, 1, 2), (B, n, h * dh))


def reference_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Attention built from primitive ops only; used to cross-check the fused op."""
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    dh = q.shape[-1] // heads
    scores = scale(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(dh))
    return merge_heads(matmul(softmax_rows(scores), vh))


# ---------------------------------------------------------------------------
# convolution (feature extractor only)

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid-padding 2-D convolution. ``x`` (B,C,H,W), ``w`` (O,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    if H < kh or W < kw or stride < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]  # B,C,Ho,Wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        gb = _sum64(g2, 0).astype(g.dtype) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _node(np.ascontiguousarray(out), parents, backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"max_pool2d: window {size} larger than input {x.shape}")
    crop = x.data[:, :, :Ho * size, :Wo * size]
    blocks = crop.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * size, Wo * size)
        gx = np.zeros_like(x.data)
        gx[:, :, :Ho * size, :Wo * size] = gb
        return (gx,)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    n_checked: int

    def passed(self, rel_tol: float) -> bool:
        return bool(self.max_rel_err < rel_tol)


def _compare(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, float]:
    abs_err = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    denom = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
    return abs_err, abs_err / denom


def numeric_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5,
                 indices: Iterable[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. selected flat entries of ``x``.

    ``x.data`` is perturbed in place and restored.
    """
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(list(indices))
    out = np.empty(idx.size)
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            out[n] = (fp - fm) / (2 * step)
    return idx, out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> GradCheckReport:
    """Compare the reverse-mode gradient of scalar ``f(x)`` with central differences.

    The relative error is the max absolute deviation divided by the largest
    gradient magnitude (a norm-wise measure that stays meaningful when single
    entries are near zero).
    """
    if x.dtype != np.float64:
        raise ValidationError("grad_check needs float64 tensors")
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y.size != 1:
        raise ShapeError(f"grad_check: function output must be scalar, got shape {y.shape}")
    if not y.requires_grad:
        analytic = np.zeros(x.size)
    else:
        y.backward()
        analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1)
    _, numeric = numeric_grad(lambda: f(x), x, step)
    abs_err, rel_err = _compare(analytic, numeric)
    return GradCheckReport(abs_err, rel_err, x.size)


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                      step: float = 1e-5, max_per_param: int | None = 24,
                      seed: int = 0) -> dict[str, GradCheckReport]:
    """Finite-difference check of ``loss_fn()`` against every tensor in ``params``.

    Large tensors are spot-checked on ``max_per_param`` randomly chosen
    entries (fixed ``seed``).
    """
    for p in params.values():
        if p.dtype != np.float64:
            raise ValidationError("grad_check_params needs float64 parameters")
        p.requires_grad = True
        p.grad = None
    loss = loss_fn()
    if loss.size != 1:
        raise ShapeError(f"grad_check_params: loss must be scalar, got shape {loss.shape}")
    loss.backward()
    rng = np.random.default_rng(seed)
    reports = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if max_per_param is None or p.size <= max_per_param:
            idx = None
        else:
            idx = np.sort(rng.choice(p.size, size=max_per_param, replace=False))
        sel, numeric = numeric_grad(loss_fn, p, step, idx)
        analytic = g.reshape(-1)[sel]
        abs_err, rel_err = _compare(analytic, numeric)
        reports[name] = GradCheckReport(abs_err, rel_err, int(sel.size))
    return reports
