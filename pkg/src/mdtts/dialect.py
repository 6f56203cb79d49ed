"""Dialect conditioning: name mapping, normalized embeddings, fusion.

Three dialects are supported, keyed 0/1/2 in listing order u-tsang, amdo,
kham. The embedding row is L2-normalized before use; fusion adds a linear
projection of that unit vector to every time step of the text features
(a concat-then-project variant is available via ``mode="concat"``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, concat_cols, div, matmul, mul, reduce_sum, reshape, sqrt

DIALECTS = ("u-tsang", "amdo", "kham")
_ALIASES = {
    "u-tsang": 0, "ü-tsang": 0, "utsang": 0, "u_tsang": 0,
    "amdo": 1,
    "kham": 2,
}

__all__ = [
    "DIALECTS", "dialect_id", "dialect_name",
    "DialectEmbeddingTable", "embed_dialect",
    "FusionProjection", "fuse",
]


def dialect_id(name: str) -> int:
    """Map a dialect name (case-insensitive, common aliases) to its id."""
    key = name.strip().lower()
    if key not in _ALIASES:
        raise ValueError(
            f"unknown dialect {name!r}; valid names: {', '.join(DIALECTS)}")
    return _ALIASES[key]


def dialect_name(did: int) -> str:
    if did not in (0, 1, 2):
        raise ValueError(f"dialect id must be 0, 1 or 2, got {did}")
    return DIALECTS[did]


@dataclass
class DialectEmbeddingTable:
    """Trainable 3 x dim embedding table, one row per dialect."""

    weights: Tensor  # (3, dim)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "DialectEmbeddingTable":
        return cls(weights=Tensor(rng.normal(scale=1.0, size=(3, dim)),
                                  requires_grad=True))

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def embed_dialect(did: int, table: DialectEmbeddingTable) -> Tensor:
    """L2-normalized embedding row for dialect ``did`` (unit Euclidean norm)."""
    if did not in (0, 1, 2):
        raise ValueError(f"dialect id must be 0, 1 or 2, got {did}")
    row = reshape(gather_row(table.weights, did), (1, table.dim))
    norm_sq = reduce_sum(mul(row, row))
    if norm_sq.item() == 0.0:
        raise ValueError(f"dialect embedding row {did} is all-zero; "
                         "cannot normalize")
    return div(row, sqrt(reshape(norm_sq, (1, 1))))


def gather_row(weights: Tensor, index: int) -> Tensor:
    from .autodiff import gather_rows

    return gather_rows(weights, [index])


@dataclass
class FusionProjection:
    """Projects the dialect embedding into the text hidden space."""

    weight: Tensor            # (emb_dim, hidden) for "add"; (hidden+emb_dim, hidden) for "concat"
    bias: Tensor              # (hidden,)
    mode: str = "add"

    @classmethod
    def init(cls, emb_dim: int, hidden: int, rng: np.random.Generator,
             mode: str = "add") -> "FusionProjection":
        if mode == "add":
            in_dim = emb_dim
        elif mode == "concat":
            in_dim = hidden + emb_dim
        else:
            raise ValueError(f"fusion mode must be 'add' or 'concat', got {mode!r}")
        scale = 1.0 / np.sqrt(in_dim)
        return cls(weight=Tensor(rng.normal(scale=scale, size=(in_dim, hidden)),
                                 requires_grad=True),
                   bias=Tensor(np.zeros(hidden), requires_grad=True),
                   mode=mode)


def fuse(h_text: Tensor, h_did: Tensor, proj: FusionProjection) -> Tensor:
    """Condition text features on the dialect vector, one of two wirings.

    ``add`` (default): h_text[t] + W.h_did + b, the projected dialect vector
    broadcast over every time step. ``concat``: per-step projection of
    [h_text[t]; h_did].
    """
    t_steps, hidden = h_text.shape
    if proj.mode == "add":
        if proj.weight.shape[1] != hidden:
            raise ValueError(
                f"fusion output dim {proj.weight.shape[1]} does not match "
                f"text hidden dim {hidden}")
        shift = add(matmul(h_did, proj.weight), proj.bias)  # (1, hidden)
        return add(h_text, shift)
    tiled = concat_cols([h_text, _tile_rows(h_did, t_steps)])
    return add(h_text, add(matmul(tiled, proj.weight), proj.bias))


def _tile_rows(row: Tensor, count: int) -> Tensor:
    from .autodiff import repeat_rows

    return repeat_rows(row, [count])
