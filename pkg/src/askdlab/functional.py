"""Composite differentiable ops built only from numkernel primitives."""

from __future__ import annotations

import numpy as np

from . import numkernel as nk
from .numkernel import ShapeError, Tensor

MASK_VALUE = -1e9  # finite stand-in for -inf; exp underflows to exactly 0


def _expand_last(t: Tensor, shape) -> Tensor:
    return nk.broadcast(t, shape)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # the shift is a constant; softmax is invariant to it
    m = nk.max_reduce(x, axis=axis, keepdims=True).detach()
    e = nk.exp(nk.sub(x, nk.broadcast(m, x.shape)))
    s = nk.sum_reduce(e, axis=axis, keepdims=True)
    return nk.mul(e, nk.broadcast(nk.reciprocal(s), x.shape))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = nk.max_reduce(x, axis=axis, keepdims=True).detach()
    z = nk.sub(x, nk.broadcast(m, x.shape))
    lse = nk.log(nk.sum_reduce(nk.exp(z), axis=axis, keepdims=True))
    return nk.sub(z, nk.broadcast(lse, x.shape))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [..., d_in] @ w [d_in, d_out] (+ b [d_out])."""
    lead = x.shape[:-1]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    flat = nk.reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
    out = nk.matmul(flat, w)
    if b is not None:
        out = nk.add(out, nk.broadcast(b, out.shape))
    if x.data.ndim != 2:
        out = nk.reshape(out, lead + (w.shape[1],))
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mean = nk.scale(nk.sum_reduce(x, axis=-1, keepdims=True), 1.0 / d)
    xc = nk.sub(x, nk.broadcast(mean, x.shape))
    var = nk.scale(nk.sum_reduce(nk.mul(xc, xc), axis=-1, keepdims=True), 1.0 / d)
    eps_t = Tensor(np.full(var.shape, eps))
    inv = nk.reciprocal(nk.sqrt(nk.add(var, eps_t)))
    y = nk.mul(xc, nk.broadcast(inv, x.shape))
    return nk.add(nk.mul(y, nk.broadcast(gain, x.shape)), nk.broadcast(bias, x.shape))


def swish(x: Tensor) -> Tensor:
    return nk.mul(x, nk.sigmoid(x))


def swiglu(x: Tensor, w: Tensor, v: Tensor, w_out: Tensor) -> Tensor:
    """(swish(x W) * (x V)) W_out over the last axis of ``x``."""
    if w.shape != v.shape or w.shape[1] != w_out.shape[0]:
        raise ShapeError(f"swiglu: W {w.shape}, V {v.shape}, W_out {w_out.shape}")
    gate = swish(linear(x, w))
    return linear(nk.mul(gate, linear(x, v)), w_out)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, T, d] -> [B*H, T, d/H]."""
    b, t, d = x.shape
    x = nk.reshape(x, (b, t, n_heads, d // n_heads))
    x = nk.transpose(x, (0, 2, 1, 3))
    return nk.reshape(x, (b * n_heads, t, d // n_heads))


def merge_heads(x: Tensor, batch: int) -> Tensor:
    bh, t, dh = x.shape
    h = bh // batch
    x = nk.reshape(x, (batch, h, t, dh))
    x = nk.transpose(x, (0, 2, 1, 3))
    return nk.reshape(x, (batch, t, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    q: [B, T, d]; k, v: [B, S, d]; mask: bool [B, T, S], true = blocked.
    """
    batch, t_len, d = q.shape
    s_len = k.shape[1]
    qh, kh, vh = split_heads(q, n_heads), split_heads(k, n_heads), split_heads(v, n_heads)
    scores = nk.scale(nk.matmul(qh, nk.transpose(kh, (0, 2, 1))), (d // n_heads) ** -0.5)
    if mask is not None:
        full = np.repeat(mask, n_heads, axis=0).reshape(batch * n_heads, t_len, s_len)
        scores = nk.mask_fill(scores, full, MASK_VALUE)
    return merge_heads(nk.matmul(softmax(scores), vh), batch)
