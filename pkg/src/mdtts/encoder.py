"""Transformer text encoder with dialect-routed feed-forward sublayers.

Each block runs multi-head self-attention, then a routed feed-forward stage:
a shared (public) FFN plus exactly one of three per-dialect private FFNs,
selected by dialect id, with the two outputs summed. Residual connections
use post-norm wiring (normalize after the residual add). Forward passes are
read-only over parameters, so concurrent inference across utterances is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat_cols,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    mul,
    softmax_rows,
    transpose,
)
from .dialect import DialectEmbeddingTable, FusionProjection, embed_dialect, fuse

__all__ = [
    "AttentionParams", "FeedForward", "RoutedFfnParams", "EncoderBlock",
    "EncoderParams", "mhsa", "routed_ffn_forward", "encoder_forward",
    "count_parameters",
]

N_DIALECTS = 3


@dataclass
class AttentionParams:
    """Per-head Q/K/V projections plus a shared output projection."""

    wq: list[Tensor]  # each (hidden, d_k)
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor        # (hidden, hidden)
    heads: int
    d_k: int

    @classmethod
    def init(cls, hidden: int, heads: int, rng: np.random.Generator) -> "AttentionParams":
        if hidden % heads != 0:
            raise ValueError(
                f"model dim {hidden} must be divisible by head count {heads}")
        d_k = hidden // heads
        scale = 1.0 / math.sqrt(hidden)

        def w(cols):
            return Tensor(rng.normal(scale=scale, size=(hidden, cols)),
                          requires_grad=True)

        return cls(wq=[w(d_k) for _ in range(heads)],
                   wk=[w(d_k) for _ in range(heads)],
                   wv=[w(d_k) for _ in range(heads)],
                   wo=w(hidden), heads=heads, d_k=d_k)


@dataclass
class FeedForward:
    """Two-layer position-wise feed-forward with GELU."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, hidden: int, inner: int, rng: np.random.Generator) -> "FeedForward":
        return cls(
            w1=Tensor(rng.normal(scale=1.0 / math.sqrt(hidden),
                                 size=(hidden, inner)), requires_grad=True),
            b1=Tensor(np.zeros(inner), requires_grad=True),
            w2=Tensor(rng.normal(scale=1.0 / math.sqrt(inner),
                                 size=(inner, hidden)), requires_grad=True),
            b2=Tensor(np.zeros(hidden), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(gelu(add(matmul(x, self.w1), self.b1)), self.w2),
                   self.b2)


@dataclass
class RoutedFfnParams:
    """Shared public FFN plus three same-shaped private FFNs keyed by dialect.

    An empty private list is the un-routed ablation: the block degenerates to
    a single shared feed-forward.
    """

    ffn_public: FeedForward
    ffn_private: list[FeedForward]

    def __post_init__(self):
        if len(self.ffn_private) not in (0, N_DIALECTS):
            raise ValueError(
                f"need {N_DIALECTS} private FFNs (or none for the shared "
                f"ablation), got {len(self.ffn_private)}")

    @property
    def routed(self) -> bool:
        return bool(self.ffn_private)

    @classmethod
    def init(cls, hidden: int, inner: int, rng: np.random.Generator,
             routed: bool = True) -> "RoutedFfnParams":
        return cls(ffn_public=FeedForward.init(hidden, inner, rng),
                   ffn_private=[FeedForward.init(hidden, inner, rng)
                                for _ in range(N_DIALECTS if routed else 0)])


@dataclass
class EncoderBlock:
    attn: AttentionParams
    norm1_gamma: Tensor
    norm1_beta: Tensor
    routed_ffn: RoutedFfnParams
    norm2_gamma: Tensor
    norm2_beta: Tensor

    @classmethod
    def init(cls, hidden: int, heads: int, ffn_inner: int,
             rng: np.random.Generator, routed: bool = True) -> "EncoderBlock":
        return cls(
            attn=AttentionParams.init(hidden, heads, rng),
            norm1_gamma=Tensor(np.ones(hidden), requires_grad=True),
            norm1_beta=Tensor(np.zeros(hidden), requires_grad=True),
            routed_ffn=RoutedFfnParams.init(hidden, ffn_inner, rng, routed=routed),
            norm2_gamma=Tensor(np.ones(hidden), requires_grad=True),
            norm2_beta=Tensor(np.zeros(hidden), requires_grad=True),
        )


@dataclass
class EncoderParams:
    embedding: Tensor  # (vocab, hidden)
    blocks: list[EncoderBlock]
    dialect_table: DialectEmbeddingTable
    fusion: FusionProjection

    @classmethod
    def init(cls, vocab_size: int, hidden: int, heads: int, ffn_inner: int,
             n_blocks: int, dialect_dim: int, rng: np.random.Generator,
             routed: "bool | Sequence[bool]" = True) -> "EncoderParams":
        """``routed`` may be one flag for all blocks or one flag per block."""
        if isinstance(routed, bool):
            per_block = [routed] * n_blocks
        else:
            per_block = [bool(r) for r in routed]
            if len(per_block) != n_blocks:
                raise ValueError(
                    f"got {len(per_block)} routing flags for {n_blocks} blocks")
        return cls(
            embedding=Tensor(rng.normal(scale=0.1, size=(vocab_size, hidden)),
                             requires_grad=True),
            blocks=[EncoderBlock.init(hidden, heads, ffn_inner, rng,
                                      routed=flag)
                    for flag in per_block],
            dialect_table=DialectEmbeddingTable.init(dialect_dim, rng),
            fusion=FusionProjection.init(dialect_dim, hidden, rng),
        )


_NEG_LARGE = -1e30


def mhsa(x: Tensor, params: AttentionParams,
         mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over one sequence.

    ``mask`` marks padded positions (True = padded); padded positions are
    excluded as attention targets for every query.
    """
    t_steps = x.shape[0]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (t_steps,):
            raise ValueError(
                f"mask shape {mask.shape} does not match sequence length {t_steps}")
        if mask.all():
            raise ValueError("attention over a fully masked sequence")
        bias = np.where(mask, _NEG_LARGE, 0.0)[None, :]
    else:
        bias = None
    inv_sqrt_dk = 1.0 / math.sqrt(params.d_k)
    head_outputs = []
    for h in range(params.heads):
        q = matmul(x, params.wq[h])
        k = matmul(x, params.wk[h])
        v = matmul(x, params.wv[h])
        logits = mul(matmul(q, transpose(k)), inv_sqrt_dk)
        if bias is not None:
            logits = add(logits, bias)
        head_outputs.append(matmul(softmax_rows(logits), v))
    stacked = head_outputs[0] if params.heads == 1 else concat_cols(head_outputs)
    return matmul(stacked, params.wo)


def routed_ffn_forward(h_attn: Tensor, did: int, params: RoutedFfnParams,
                 block_index: int = 0,
                 trace: list[tuple[int, int]] | None = None) -> Tensor:
    """Public FFN plus the one private FFN selected by dialect id, summed."""
    if did not in (0, 1, 2):
        raise ValueError(f"dialect id must be 0, 1 or 2, got {did}")
    if not params.routed:
        raise ValueError("routed_ffn_forward needs private branches; this block is "
                         "the shared-FFN ablation")
    selected = params.ffn_private[did]
    if trace is not None:
        trace.append((block_index, did))
    return add(params.ffn_public(h_attn), selected(h_attn))


def encoder_forward(token_ids, did: int, params: EncoderParams,
                    mask: np.ndarray | None = None,
                    trace: list[tuple[int, int]] | None = None) -> Tensor:
    """Token embedding -> N x [attention, routed FFN] blocks -> dialect fusion."""
    ids = [int(i) for i in (token_ids.ids if hasattr(token_ids, "ids") else token_ids)]
    h = gather_rows(params.embedding, ids)
    for i, block in enumerate(params.blocks):
        attn_out = mhsa(h, block.attn, mask=mask)
        h = layer_norm(add(h, attn_out), block.norm1_gamma, block.norm1_beta)
        if block.routed_ffn.routed:
            ffn_out = routed_ffn_forward(h, did, block.routed_ffn,
                                         block_index=i, trace=trace)
        else:
            ffn_out = block.routed_ffn.ffn_public(h)
        h = layer_norm(add(h, ffn_out), block.norm2_gamma, block.norm2_beta)
    h_did = embed_dialect(did, params.dialect_table)
    return fuse(h, h_did, params.fusion)


def count_parameters(obj) -> int:
    """Total scalar parameter count reachable from a params dataclass."""
    total = 0
    for tensor in iter_tensors(obj):
        total += tensor.size
    return total


def iter_tensors(obj):
    if isinstance(obj, Tensor):
        yield obj
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from iter_tensors(item)
    elif hasattr(obj, "__dataclass_fields__"):
        for name in obj.__dataclass_fields__:
            yield from iter_tensors(getattr(obj, name))
