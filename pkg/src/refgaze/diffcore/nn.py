"""Neural building blocks assembled from autodiff primitives."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError
from . import autodiff as ad
from .autodiff import Node


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, b)
    return out


def multi_head_attention(q, k, v, n_heads, mask=None, w_out=None, b_out=None,
                         return_weights=False):
    """Scaled dot-product attention over already-projected q/k/v.

    q: (..., Tq, d), k/v: (..., Tk, d) with d divisible by n_heads.
    mask: optional; either a per-batch key-validity mask of shape (B, Tk)
    (fused fast path) or a bool array broadcastable to (..., Tq, Tk).
    True = may attend. Rows whose keys are all masked output zeros (their
    softmax weights are all zero by convention), which keeps fully-padded
    windows NaN-free.
    """
    q, k, v = ad.as_node(q), ad.as_node(k), ad.as_node(v)
    d = q.value.shape[-1]
    if d % n_heads != 0:
        raise ConfigError(f"model dim {d} not divisible by n_heads {n_heads}")
    if k.value.shape[-1] != d or v.value.shape[-1] != d:
        raise ShapeError(
            f"attention dims disagree: q {q.value.shape}, k {k.value.shape}, v {v.value.shape}"
        )
    dh = d // n_heads
    lead = q.value.shape[:-2]
    tq, tk = q.value.shape[-2], k.value.shape[-2]

    def split(x, t):
        # (..., t, d) -> (..., heads, t, dh)
        x = ad.reshape(x, lead + (t, n_heads, dh))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return ad.transpose(x, axes)

    # fold the 1/sqrt(dh) scale into q (27x smaller than the score tensor)
    qh = split(ad.mul(q, ad.constant(1.0 / np.sqrt(dh))), tq)
    kh, vh = split(k, tk), split(v, tk)
    scores = ad.matmul(
        qh,
        ad.transpose(kh, tuple(range(len(lead))) + (len(lead), len(lead) + 2, len(lead) + 1)),
    )
    key_mask = None
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.ndim == 2 and len(lead) == 1 and m.shape == (lead[0], tk):
            key_mask = m
    if key_mask is not None:
        weights = ad.key_masked_softmax(scores, key_mask)
    elif mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), lead + (tq, tk))
        m = np.expand_dims(m, axis=len(lead))  # head axis
        weights = ad.masked_softmax(scores, m, axis=-1)
    else:
        weights = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(weights, vh)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    out = ad.reshape(ad.transpose(ctx, axes), lead + (tq, d))
    if w_out is not None:
        out = linear(out, w_out, b_out)
    if return_weights:
        return out, weights
    return out


class LayerParams:
    """Helper that creates/fetches the parameters of one transformer layer."""

    def __init__(self, store, prefix, d, d_ffn, rng=None, cross=False):
        self.store = store
        self.prefix = prefix
        if rng is not None:
            self._init(d, d_ffn, rng, cross)
        self.cross = cross

    def _init(self, d, d_ffn, rng, cross):
        s, p = self.store, self.prefix
        blocks = ["self"] + (["cross"] if cross else [])
        for blk in blocks:
            for nm in ("wq", "wk", "wv", "wo"):
                s.create(f"{p}.{blk}.{nm}", xavier_uniform(rng, d, d))
            # no key bias: a shared offset on every key cancels in the
            # row-wise softmax, leaving a parameter with exactly zero grad
            for nm in ("bq", "bv", "bo"):
                s.create(f"{p}.{blk}.{nm}", np.zeros(d, np.float32))
            s.create(f"{p}.{blk}.ln_g", np.ones(d, np.float32))
            s.create(f"{p}.{blk}.ln_b", np.zeros(d, np.float32))
        s.create(f"{p}.ffn.w1", xavier_uniform(rng, d, d_ffn))
        s.create(f"{p}.ffn.b1", np.zeros(d_ffn, np.float32))
        s.create(f"{p}.ffn.w2", xavier_uniform(rng, d_ffn, d))
        s.create(f"{p}.ffn.b2", np.zeros(d, np.float32))
        s.create(f"{p}.ffn.ln_g", np.ones(d, np.float32))
        s.create(f"{p}.ffn.ln_b", np.zeros(d, np.float32))

    def _attn(self, blk, x_q, x_kv, n_heads, mask, rate, rng):
        s, p = self.store, self.prefix
        q = linear(x_q, s[f"{p}.{blk}.wq"], s[f"{p}.{blk}.bq"])
        k = linear(x_kv, s[f"{p}.{blk}.wk"])
        v = linear(x_kv, s[f"{p}.{blk}.wv"], s[f"{p}.{blk}.bv"])
        out = multi_head_attention(
            q, k, v, n_heads, mask=mask,
            w_out=s[f"{p}.{blk}.wo"], b_out=s[f"{p}.{blk}.bo"],
        )
        out = ad.dropout(out, rate, rng)
        return ad.layer_norm(ad.add(x_q, out), s[f"{p}.{blk}.ln_g"], s[f"{p}.{blk}.ln_b"])

    def _ffn(self, x, rate, rng):
        s, p = self.store, self.prefix
        h = ad.gelu(linear(x, s[f"{p}.ffn.w1"], s[f"{p}.ffn.b1"]))
        h = linear(h, s[f"{p}.ffn.w2"], s[f"{p}.ffn.b2"])
        h = ad.dropout(h, rate, rng)
        return ad.layer_norm(ad.add(x, h), s[f"{p}.ffn.ln_g"], s[f"{p}.ffn.ln_b"])

    def encode(self, x, n_heads, self_mask=None, rate=0.0, rng=None):
        x = self._attn("self", x, x, n_heads, self_mask, rate, rng)
        return self._ffn(x, rate, rng)

    def decode(self, x, memory, n_heads, self_mask=None, cross_mask=None,
               rate=0.0, rng=None):
        x = self._attn("self", x, x, n_heads, self_mask, rate, rng)
        x = self._attn("cross", x, memory, n_heads, cross_mask, rate, rng)
        return self._ffn(x, rate, rng)
