"""Multi-head attention primitives and the pre-norm transformer block.

All ops are pure functions of their inputs and shape-polymorphic over
leading stack axes: a [N, C] argument computes one attention, a [B, N, C]
argument computes B of them in one fused pass. Positional information is
never injected here; callers add their own embeddings, which keeps
self-attention exactly permutation-equivariant.

The output projection w_o is applied inside every attention op, so a single
four-matrix weight set fully determines the op. Downstream batch-consistent
attention reuses these same weights unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .tensor import (
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    add,
    gelu,
    layernorm,
    linear,
    matmul,
    reshape,
    scale,
    softmax,
    transpose,
)


@dataclass
class AttentionWeights:
    """Query/key/value/output projections, all square of side C."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self) -> None:
        shapes = {m.shape for m in (self.w_q, self.w_k, self.w_v, self.w_o)}
        if len(shapes) != 1:
            raise DimensionError(f"projection shapes differ: {sorted(shapes)}")
        (c0, c1) = self.w_q.shape
        if c0 != c1:
            raise DimensionError(f"projections must be square, got {self.w_q.shape}")
        if self.heads < 1 or c0 % self.heads != 0:
            raise ContractError(
                f"heads must divide channel dim: C={c0}, heads={self.heads}"
            )

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., N, C] -> [..., heads, N, C/heads]."""
    lead = x.shape[:-2]
    n, c = x.shape[-2], x.shape[-1]
    x = reshape(x, lead + (n, heads, c // heads))
    r = x.ndim
    perm = tuple(range(r - 3)) + (r - 2, r - 3, r - 1)
    return transpose(x, perm)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., heads, N, d] -> [..., N, heads*d]."""
    lead = x.shape[:-3]
    h, n, d = x.shape[-3], x.shape[-2], x.shape[-1]
    r = x.ndim
    perm = tuple(range(r - 3)) + (r - 2, r - 3, r - 1)
    return reshape(transpose(x, perm), lead + (n, h * d))


def scaled_dot_product_attention(
    q_src: Tensor, k_src: Tensor, v_src: Tensor, w: AttentionWeights
) -> Tensor:
    """Project sources through w, attend per head, fuse heads through w_o.

    q_src supplies the queries; k_src/v_src must agree on token count and
    supply keys and values. Shapes are [..., N, C] with identical leading
    axes across the three sources.
    """
    if q_src.ndim < 2 or q_src.shape[-1] != w.channels:
        raise DimensionError(
            f"queries must be [..., N, {w.channels}], got {q_src.shape}"
        )
    if k_src.shape != v_src.shape:
        raise DimensionError(
            f"key/value sources differ: {k_src.shape} vs {v_src.shape}"
        )
    if k_src.shape[:-2] != q_src.shape[:-2] or k_src.shape[-1] != w.channels:
        raise DimensionError(
            f"key source {k_src.shape} incompatible with queries {q_src.shape}"
        )
    if k_src.shape[-2] == 0:
        raise ContractError("attention over an empty key set")

    q = _split_heads(matmul(q_src, w.w_q), w.heads)
    k = _split_heads(matmul(k_src, w.w_k), w.heads)
    v = _split_heads(matmul(v_src, w.w_v), w.heads)
    r = k.ndim
    scores = scale(matmul(q, transpose(k, tuple(range(r - 2)) + (r - 1, r - 2))),
                   1.0 / math.sqrt(w.head_dim))
    probs = softmax(scores)
    return matmul(_merge_heads(matmul(probs, v)), w.w_o)


def self_attention(tokens: Tensor, w: AttentionWeights) -> Tensor:
    """Eq.-(1)-style attention where queries, keys and values share tokens."""
    return scaled_dot_product_attention(tokens, tokens, tokens, w)


def cross_attention(queries: Tensor, context: Tensor, w: AttentionWeights) -> Tensor:
    """Attention reading keys/values from a separate context sequence."""
    if context.shape[-2] == 0:
        raise ContractError("cross_attention requires a non-empty context")
    return scaled_dot_product_attention(queries, context, context, w)


@dataclass
class TransformerBlockParams:
    """Pre-norm residual block: self-attention, optional cross, MLP."""

    attn: AttentionWeights
    ln1_gain: Tensor
    ln1_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    cross: AttentionWeights | None = None
    lnc_gain: Tensor | None = None
    lnc_bias: Tensor | None = None


def transformer_block(
    tokens: Tensor,
    params: TransformerBlockParams,
    context: Tensor | None = None,
) -> Tensor:
    """x += attn(LN(x)); x += cross(LN(x), ctx) when given; x += mlp(LN(x))."""
    x = add(tokens, self_attention(
        layernorm(tokens, params.ln1_gain, params.ln1_bias), params.attn))
    if context is not None:
        if params.cross is None:
            raise ContractError("block has no cross-attention weights")
        x = add(x, cross_attention(
            layernorm(x, params.lnc_gain, params.lnc_bias), context, params.cross))
    h = layernorm(x, params.ln2_gain, params.ln2_bias)
    h = linear(gelu(linear(h, params.mlp_w1, params.mlp_b1)),
               params.mlp_w2, params.mlp_b2)
    return add(x, h)


def init_attention_weights(
    c: int, heads: int, rng: RngStream, w_scale: float = 0.02
) -> AttentionWeights:
    mats = [Tensor(rng.normal((c, c)) * w_scale) for _ in range(4)]
    return AttentionWeights(*mats, heads=heads)


def init_transformer_block(
    c: int, heads: int, rng: RngStream, with_cross: bool = False,
    w_scale: float = 0.02,
) -> TransformerBlockParams:
    hidden = 4 * c
    params = TransformerBlockParams(
        attn=init_attention_weights(c, heads, rng.child(0), w_scale),
        ln1_gain=Tensor(np.ones(c, dtype=np.float32)),
        ln1_bias=Tensor(np.zeros(c, dtype=np.float32)),
        mlp_w1=Tensor(rng.child(1).normal((c, hidden)) * w_scale),
        mlp_b1=Tensor(np.zeros(hidden, dtype=np.float32)),
        mlp_w2=Tensor(rng.child(2).normal((hidden, c)) * w_scale),
        mlp_b2=Tensor(np.zeros(c, dtype=np.float32)),
        ln2_gain=Tensor(np.ones(c, dtype=np.float32)),
        ln2_bias=Tensor(np.zeros(c, dtype=np.float32)),
    )
    if with_cross:
        params.cross = init_attention_weights(c, heads, rng.child(3), w_scale)
        params.lnc_gain = Tensor(np.ones(c, dtype=np.float32))
        params.lnc_bias = Tensor(np.zeros(c, dtype=np.float32))
    return params


def attention_parameters(w: AttentionWeights, prefix: str) -> list[Parameter]:
    return [
        Parameter(f"{prefix}.w_q", w.w_q),
        Parameter(f"{prefix}.w_k", w.w_k),
        Parameter(f"{prefix}.w_v", w.w_v),
        Parameter(f"{prefix}.w_o", w.w_o),
    ]


def block_parameters(params: TransformerBlockParams, prefix: str) -> list[Parameter]:
    out = attention_parameters(params.attn, f"{prefix}.attn")
    out += [
        Parameter(f"{prefix}.ln1_gain", params.ln1_gain),
        Parameter(f"{prefix}.ln1_bias", params.ln1_bias),
        Parameter(f"{prefix}.mlp_w1", params.mlp_w1),
        Parameter(f"{prefix}.mlp_b1", params.mlp_b1),
        Parameter(f"{prefix}.mlp_w2", params.mlp_w2),
        Parameter(f"{prefix}.mlp_b2", params.mlp_b2),
        Parameter(f"{prefix}.ln2_gain", params.ln2_gain),
        Parameter(f"{prefix}.ln2_bias", params.ln2_bias),
    ]
    if params.cross is not None:
        out += attention_parameters(params.cross, f"{prefix}.cross")
        out += [
            Parameter(f"{prefix}.lnc_gain", params.lnc_gain),
            Parameter(f"{prefix}.lnc_bias", params.lnc_bias),
        ]
    return out
