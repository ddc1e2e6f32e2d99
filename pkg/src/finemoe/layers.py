"""Reusable network building blocks: RoPE, attention, feed-forward, norms.

All layers hold their weights as ``Tensor`` leaves and expose them through
``parameters()`` as an ordered name -> Tensor mapping, which fixes the
serialization order for checkpoints.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError, Tensor, concat, matmul, record_op, rms_norm,
    silu, slice_cols, softmax,
)

# Large-but-finite mask value: exp(MASK - max) underflows to exactly 0.0 in
# float64, which is what makes the causality test bitwise.
ATTENTION_MASK_VALUE = -1e30


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    """Normal init with std 1/sqrt(fan_in)."""
    std = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)


def rope_frequencies(head_dim: int, base: float) -> np.ndarray:
    """Per-pair inverse wavelengths: base**(-2i/head_dim) for pair index i."""
    if head_dim % 2 != 0:
        raise ShapeError(f"rotary embedding needs an even head_dim, got {head_dim}")
    i = np.arange(head_dim // 2)
    return base ** (-2.0 * i / head_dim)


def rope_apply(vectors: Tensor, positions, base: float) -> Tensor:
    """Rotate consecutive dimension pairs by angle position * base**(-2i/d).

    The rotation is orthogonal, so the backward rule is the inverse
    rotation applied to the output gradient.
    """
    if vectors.data.ndim != 2:
        raise ShapeError(f"rope_apply expects [T, head_dim], got {vectors.shape}")
    t, head_dim = vectors.shape
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (t,):
        raise ShapeError(f"rope_apply: {t} rows but {pos.shape} positions")
    freqs = rope_frequencies(head_dim, base)
    angles = pos[:, None] * freqs[None, :]        # [T, head_dim/2]
    cos, sin = np.cos(angles), np.sin(angles)

    x = vectors.data.reshape(t, head_dim // 2, 2)
    rotated = np.empty_like(x)
    rotated[:, :, 0] = x[:, :, 0] * cos - x[:, :, 1] * sin
    rotated[:, :, 1] = x[:, :, 0] * sin + x[:, :, 1] * cos
    out = Tensor(rotated.reshape(t, head_dim))

    def bwd(g):
        gp = g.reshape(t, head_dim // 2, 2)
        back = np.empty_like(gp)
        back[:, :, 0] = gp[:, :, 0] * cos + gp[:, :, 1] * sin
        back[:, :, 1] = -gp[:, :, 0] * sin + gp[:, :, 1] * cos
        return (back.reshape(t, head_dim),)

    return record_op(out, (vectors,), bwd)


def _causal_mask(t: int) -> Tensor:
    mask = np.triu(np.full((t, t), ATTENTION_MASK_VALUE), k=1)
    return Tensor(mask)


class RMSNorm:
    def __init__(self, dim: int):
        self.weight = Tensor(np.ones(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return rms_norm(x, self.weight)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight}


class FeedForward:
    """Two- or three-matrix FFN.

    Gated form (used by experts and the visual resampler):
        down( silu(x @ gate) * (x @ up) )
    Plain form: down( silu(x @ up) ).
    """

    def __init__(self, rng: np.random.Generator, dim_in: int, hidden: int,
                 dim_out: int, gated: bool = True, row_stable: bool = False):
        self.gated = gated
        self.row_stable = row_stable
        if gated:
            self.w_gate = init_weight(rng, dim_in, hidden)
        self.w_up = init_weight(rng, dim_in, hidden)
        self.w_down = init_weight(rng, hidden, dim_out)

    def __call__(self, x: Tensor) -> Tensor:
        rs = self.row_stable
        if self.gated:
            h = silu(matmul(x, self.w_gate, rs)) * matmul(x, self.w_up, rs)
        else:
            h = silu(matmul(x, self.w_up, rs))
        return matmul(h, self.w_down, rs)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        if self.gated:
            params["w_gate"] = self.w_gate
        params["w_up"] = self.w_up
        params["w_down"] = self.w_down
        return params


class SelfAttention:
    """Multi-head self-attention, causal or bidirectional, optional RoPE."""

    def __init__(self, rng: np.random.Generator, dim: int, n_heads: int,
                 causal: bool, use_rope: bool = False):
        if dim % n_heads != 0:
            raise ShapeError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.causal = causal
        self.use_rope = use_rope
        self.w_q = init_weight(rng, dim, dim)
        self.w_k = init_weight(rng, dim, dim)
        self.w_v = init_weight(rng, dim, dim)
        self.w_o = init_weight(rng, dim, dim)

    def __call__(self, x: Tensor, positions=None, rope_base: float | None = None) -> Tensor:
        if self.use_rope and (positions is None or rope_base is None):
            raise ShapeError("rotary attention needs positions and rope_base")
        t = x.shape[0]
        q = matmul(x, self.w_q)
        k = matmul(x, self.w_k)
        v = matmul(x, self.w_v)
        mask = _causal_mask(t) if self.causal else None
        scale = Tensor(1.0 / np.sqrt(self.head_dim))

        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
            if self.use_rope:
                qh = rope_apply(qh, positions, rope_base)
                kh = rope_apply(kh, positions, rope_base)
            scores = matmul(qh, kh.T) * scale
            if mask is not None:
                scores = scores + mask
            heads.append(matmul(softmax(scores, axis=1), vh))
        return matmul(concat(heads, axis=1), self.w_o)

    def parameters(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


class CrossAttention:
    """Multi-head cross-attention: external query vectors attend to keys/values."""

    def __init__(self, rng: np.random.Generator, dim: int, n_heads: int):
        if dim % n_heads != 0:
            raise ShapeError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.w_q = init_weight(rng, dim, dim)
        self.w_k = init_weight(rng, dim, dim)
        self.w_v = init_weight(rng, dim, dim)
        self.w_o = init_weight(rng, dim, dim)

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        q = matmul(queries, self.w_q)
        k = matmul(context, self.w_k)
        v = matmul(context, self.w_v)
        scale = Tensor(1.0 / np.sqrt(self.head_dim))
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
            attn = softmax(matmul(qh, kh.T) * scale, axis=1)
            heads.append(matmul(attn, vh))
        return matmul(concat(heads, axis=1), self.w_o)

    def parameters(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def flatten_parameters(prefix: str, layers) -> dict[str, Tensor]:
    """Merge child ``parameters()`` maps under dotted names."""
    out: dict[str, Tensor] = {}
    for name, layer in layers:
        for key, tensor in layer.parameters().items():
            out[f"{prefix}{name}.{key}" if prefix else f"{name}.{key}"] = tensor
    return out
