"""Text-to-frame timing: monotonic alignment search, duration prediction,
and length regulation.

The alignment search maximizes the summed score over all monotonic surjective
paths (every text position covers at least one frame, no skips) by dynamic
programming; ties prefer staying on the current text position so results are
deterministic. Alignment scores for training are the negative squared
distances between projected text features and mel frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    gelu,
    layer_norm,
    matmul,
    repeat_rows,
)

__all__ = [
    "AlignmentPath", "mas", "alignment_scores",
    "DurationPredictorParams", "predict_durations", "durations_from_log",
    "length_regulate",
]


@dataclass(frozen=True)
class AlignmentPath:
    """Frame counts per text position; sums to the number of mel frames."""

    durations: tuple[int, ...]
    total_frames: int

    def __post_init__(self):
        if any(d < 1 for d in self.durations):
            raise ValueError("alignment durations must all be >= 1")
        if sum(self.durations) != self.total_frames:
            raise ValueError(
                f"durations sum {sum(self.durations)} != total frames "
                f"{self.total_frames}")


def mas(score: np.ndarray) -> AlignmentPath:
    """Best monotonic surjective alignment of text rows to frame columns.

    ``score[i, j]`` is the affinity of text position i with frame j. Returns
    the argmax path as per-position durations.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2:
        raise ValueError(f"score must be 2-D, got shape {score.shape}")
    t_text, t_mel = score.shape
    if t_text < 1:
        raise ValueError("need at least one text position")
    if t_mel < t_text:
        raise ValueError(
            f"no monotonic surjective path exists: {t_mel} frames < "
            f"{t_text} text positions")

    neg_inf = -np.inf
    q = np.full((t_text, t_mel), neg_inf)
    q[0, 0] = score[0, 0]
    for j in range(1, t_mel):
        q[0, j] = q[0, j - 1] + score[0, j]
    for i in range(1, t_text):
        for j in range(i, t_mel - (t_text - 1 - i)):
            stay = q[i, j - 1]
            advance = q[i - 1, j - 1]
            q[i, j] = max(stay, advance) + score[i, j]

    # backtrack; ties prefer staying on the current text position
    durations = [0] * t_text
    i = t_text - 1
    for j in range(t_mel - 1, -1, -1):
        durations[i] += 1
        if j > 0 and i > 0:
            if q[i, j - 1] >= q[i - 1, j - 1]:
                pass  # stay
            else:
                i -= 1
    return AlignmentPath(durations=tuple(durations), total_frames=t_mel)


def mas_path_value(score: np.ndarray, durations) -> float:
    """Summed score of a given duration path (shared by tests and training)."""
    total = 0.0
    j = 0
    for i, d in enumerate(durations):
        for _ in range(d):
            total += float(score[i, j])
            j += 1
    return total


def alignment_scores(projected_text: np.ndarray, mel: np.ndarray) -> np.ndarray:
    """Negative squared Euclidean distance between each text row and frame."""
    diff = projected_text[:, None, :] - mel[None, :, :]
    return -np.sum(diff * diff, axis=2)


@dataclass
class DurationPredictorParams:
    """Small position-wise feed-forward stack, one log-duration per position."""

    w1: Tensor
    b1: Tensor
    norm_gamma: Tensor
    norm_beta: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, hidden: int, inner: int,
             rng: np.random.Generator) -> "DurationPredictorParams":
        return cls(
            w1=Tensor(rng.normal(scale=1.0 / math.sqrt(hidden),
                                 size=(hidden, inner)), requires_grad=True),
            b1=Tensor(np.zeros(inner), requires_grad=True),
            norm_gamma=Tensor(np.ones(inner), requires_grad=True),
            norm_beta=Tensor(np.zeros(inner), requires_grad=True),
            w2=Tensor(rng.normal(scale=1.0 / math.sqrt(inner),
                                 size=(inner, 1)), requires_grad=True),
            b2=Tensor(np.zeros(1), requires_grad=True),
        )


def predict_durations(h_text: Tensor, params: DurationPredictorParams) -> Tensor:
    """Log-durations, shape (T, 1), one scalar per input position."""
    hidden = gelu(add(matmul(h_text, params.w1), params.b1))
    hidden = layer_norm(hidden, params.norm_gamma, params.norm_beta)
    return add(matmul(hidden, params.w2), params.b2)


def durations_from_log(log_d: np.ndarray) -> list[int]:
    """Inference rounding rule: max(1, round(exp(log_d)))."""
    arr = np.asarray(log_d, dtype=np.float64).reshape(-1)
    return [max(1, int(round(float(math.exp(v))))) for v in arr]


def length_regulate(h_text: Tensor, durations) -> Tensor:
    """Repeat row t of ``h_text`` durations[t] times (upsampling)."""
    counts = list(int(d) for d in (durations.durations
                                   if isinstance(durations, AlignmentPath)
                                   else durations))
    if any(c < 1 for c in counts):
        raise ValueError("length_regulate durations must all be >= 1")
    return repeat_rows(h_text, counts)
