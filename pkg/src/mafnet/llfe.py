"""Learnable local feature enhancement: patch/pixel cross-attention units.

An encoder lets the learnable patches query the pixel features; the
following decoder lets the pixels query the updated patches. Units are
stacked, alternately refreshing the patches and the feature matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mlfe import EVAL, check_mode
from .tensor import (
    DimensionError,
    Rng,
    Tensor,
    add,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    scale,
    softmax_rows,
    swapaxes,
)

LN_EPS = 1e-5


@dataclass(frozen=True)
class AttentionHeadParams:
    """Projections for all heads, stored side by side.

    ``w_q[:, h*d_k:(h+1)*d_k]`` is head ``h``'s query projection (likewise
    for keys and values); ``w_o`` maps the concatenated head outputs back
    to C.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        c = self.w_q.shape[0]
        if self.heads < 1 or c % self.heads:
            raise ValueError(f"heads={self.heads} must divide C={c}")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (c, c):
                raise ValueError(f"{name} must be {c}x{c}, got {getattr(self, name).shape}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass(frozen=True)
class CoderParams:
    """One encoder or decoder block (attention, two norms, feed-forward)."""

    attn: AttentionHeadParams
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


def _split_heads(t: Tensor, heads: int) -> Tensor:
    # (..., M, C) -> (..., heads, M, d)
    *lead, m, c = t.shape
    return swapaxes(reshape(t, tuple(lead) + (m, heads, c // heads)), -2, -3)


def _merge_heads(t: Tensor) -> Tensor:
    # (..., heads, M, d) -> (..., M, heads*d)
    t = swapaxes(t, -2, -3)
    *lead, m, h, d = t.shape
    return reshape(t, tuple(lead) + (m, h * d))


def head_drop_mask(lead: tuple[int, ...], heads: int, p_head: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Per-position keep mask ``lead + (heads,)`` and dropped head (-1 for none)."""
    fire = rng.uniform(lead) < p_head
    index = rng.integers(0, heads, size=lead)
    keep = np.ones(lead + (heads,))
    flat = keep.reshape(-1, heads)
    rows = np.flatnonzero(fire.reshape(-1))
    flat[rows, index.reshape(-1)[rows]] = 0.0
    return keep, np.where(fire, index, -1)


def cross_attention(q_src: Tensor, kv_src: Tensor, params: AttentionHeadParams,
                    p_head: float, rng: Rng | None, mode: str,
                    return_weights: bool = False):
    """Multi-head cross-attention with whole-head attention drop.

    In train mode, with probability ``p_head`` one head's weight matrix is
    zeroed (per leading position). Returns the ``(..., M_q, C)`` output, and
    with ``return_weights`` also the post-drop weights ``(..., heads, M_q, M_kv)``.
    """
    check_mode(mode)
    c = params.channels
    if q_src.shape[-1] != c or kv_src.shape[-1] != c:
        raise DimensionError(f"cross_attention: features {q_src.shape}/{kv_src.shape} vs C={c}")
    h = params.heads
    q = _split_heads(matmul(q_src, params.w_q), h)
    k = _split_heads(matmul(kv_src, params.w_k), h)
    v = _split_heads(matmul(kv_src, params.w_v), h)
    weights = softmax_rows(scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(params.head_dim)))
    if mode != EVAL and p_head > 0.0:
        if rng is None:
            raise ValueError("train-mode cross_attention needs an rng")
        lead = weights.shape[:-3]
        keep, dropped = head_drop_mask(lead, h, p_head, rng)
        if (dropped >= 0).any():
            weights = mul(weights, Tensor(keep[..., None, None]))
    out = matmul(_merge_heads(matmul(weights, v)), params.w_o)
    return (out, weights) if return_weights else out


def feed_forward(u: Tensor, params: CoderParams) -> Tensor:
    hidden = gelu(add(matmul(u, params.ffn_w1), params.ffn_b1))
    return add(matmul(hidden, params.ffn_w2), params.ffn_b2)


def _block(query: Tensor, context: Tensor, params: CoderParams,
           p_head: float, rng: Rng | None, mode: str) -> Tensor:
    a = cross_attention(query, context, params.attn, p_head, rng, mode)
    u = layer_norm(add(query, a), params.norm1_gamma, params.norm1_beta, LN_EPS)
    return layer_norm(add(u, feed_forward(u, params)), params.norm2_gamma, params.norm2_beta, LN_EPS)


def encoder_step(patches: Tensor, x: Tensor, params: CoderParams,
                 p_head: float, rng: Rng | None, mode: str) -> Tensor:
    """Patches (queries) attend over pixel features; returns updated patches.

    Unbatched ``(N, C)`` patches broadcast against a batch of feature matrices.
    """
    return _block(patches, x, params, p_head, rng, mode)


def decoder_step(x: Tensor, patches: Tensor, params: CoderParams,
                 p_head: float, rng: Rng | None, mode: str) -> Tensor:
    """Pixel features (queries) attend over the patches; returns updated features."""
    return _block(x, patches, params, p_head, rng, mode)


def llfe_forward(x: Tensor, patches: Tensor, units, p_head: float,
                 rng: Rng | None, mode: str) -> Tensor:
    """Run the stacked (encoder, decoder) units and return the final features."""
    units = list(units)
    if not units:
        raise ValueError("llfe_forward needs at least one encoder/decoder unit")
    if patches.shape[-1] != x.shape[-1]:
        raise DimensionError(f"patches {patches.shape} vs features {x.shape}")
    for i, (enc, dec) in enumerate(units):
        enc_rng = rng.split(i, 0) if rng is not None else None
        dec_rng = rng.split(i, 1) if rng is not None else None
        patches = encoder_step(patches, x, enc, p_head, enc_rng, mode)
        x = decoder_step(x, patches, dec, p_head, dec_rng, mode)
    return x
