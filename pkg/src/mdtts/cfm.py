"""Conditional flow-matching mel decoder.

Training pairs couple a noise sample x0 with a data sample x1 along the
optimal-transport interpolant x_t = (1 - (1 - sigma_min) t) x0 + t x1 with
target field u = x1 - (1 - sigma_min) x0; the field network regresses u.
Sampling integrates the learned field with fixed-step Euler from seeded
Gaussian noise, so outputs are deterministic given (params, cond, seed,
n_steps).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat_cols,
    gelu,
    matmul,
    mul,
    reduce_mean,
    repeat_rows,
    sub,
)

__all__ = [
    "ot_cfm_pair", "FieldNetParams", "field_forward", "time_embedding",
    "cfm_loss", "euler_sample", "MelSpectrogram", "write_mel", "read_mel",
]

MEL_MAGIC = b"MEL1"


@dataclass
class MelSpectrogram:
    """Frames x mel-bins matrix plus the audio geometry it was computed with."""

    frames: np.ndarray  # (F, M)
    sample_rate: int
    hop_length: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"mel frames must be 2-D, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("mel frames contain non-finite values")

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def ot_cfm_pair(x1: np.ndarray, x0: np.ndarray, t: float,
                sigma_min: float) -> tuple[np.ndarray, np.ndarray]:
    """Interpolant point and target field for one (data, noise, time) triple."""
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x1.shape != x0.shape:
        raise ValueError(f"shape mismatch: data {x1.shape} vs noise {x0.shape}")
    if not 0.0 <= sigma_min < 1.0:
        raise ValueError(f"sigma_min must be in [0, 1), got {sigma_min}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation time must be in [0, 1], got {t}")
    x_t = (1.0 - (1.0 - sigma_min) * t) * x0 + t * x1
    u_target = x1 - (1.0 - sigma_min) * x0
    return x_t, u_target


def time_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a scalar time in [0, 1]."""
    if dim % 2 != 0:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


@dataclass
class FieldNetParams:
    """Position-wise stack mapping (x_t, cond, time features) to a field."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    time_dim: int

    @classmethod
    def init(cls, n_mels: int, cond_dim: int, hidden: int, time_dim: int,
             rng: np.random.Generator) -> "FieldNetParams":
        in_dim = n_mels + cond_dim + time_dim

        def w(rows, cols):
            return Tensor(rng.normal(scale=1.0 / math.sqrt(rows),
                                     size=(rows, cols)), requires_grad=True)

        return cls(
            w1=w(in_dim, hidden), b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=w(hidden, hidden), b2=Tensor(np.zeros(hidden), requires_grad=True),
            w3=w(hidden, n_mels), b3=Tensor(np.zeros(n_mels), requires_grad=True),
            time_dim=time_dim,
        )


def field_forward(params: FieldNetParams, x_t, t: float, cond: Tensor) -> Tensor:
    """Predicted field at (x_t, t) under conditioning ``cond`` (already fused)."""
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=np.float64))
    frames = x_t.shape[0]
    if cond.shape[0] != frames:
        raise ValueError(
            f"conditioning has {cond.shape[0]} frames, x_t has {frames}")
    t_emb = Tensor(time_embedding(t, params.time_dim).reshape(1, -1))
    features = concat_cols([x_t, cond, repeat_rows(t_emb, [frames])])
    h = gelu(add(matmul(features, params.w1), params.b1))
    h = gelu(add(matmul(h, params.w2), params.b2))
    return add(matmul(h, params.w3), params.b3)


def cfm_loss(batch: Sequence[tuple[np.ndarray, Tensor]],
             field_fn: Callable[[np.ndarray, float, Tensor], Tensor],
             sigma_min: float,
             rng: np.random.Generator) -> Tensor:
    """Mean squared field-matching error over a batch.

    ``batch`` holds (target mel, conditioning) pairs. Per item, in order, one
    standard-normal x0 and one uniform t are drawn from ``rng`` (this sampling
    order is part of the determinism contract). ``field_fn(x_t, t, cond)``
    returns the predicted field.
    """
    if not batch:
        raise ValueError("cfm_loss needs a non-empty batch")
    losses = []
    for x1, cond in batch:
        x1 = np.asarray(x1, dtype=np.float64)
        x0 = rng.standard_normal(x1.shape)
        t = float(rng.uniform(0.0, 1.0))
        x_t, u_target = ot_cfm_pair(x1, x0, t, sigma_min)
        pred = field_fn(x_t, t, cond)
        diff = sub(pred, Tensor(u_target))
        losses.append(reduce_mean(mul(diff, diff)))
    total = losses[0]
    for term in losses[1:]:
        total = add(total, term)
    return mul(total, 1.0 / len(losses))


def euler_sample(field_fn: Callable[[np.ndarray, float], np.ndarray],
                 shape: tuple[int, int],
                 n_steps: int,
                 seed: int) -> np.ndarray:
    """Fixed-step Euler integration of ``field_fn`` from seeded noise.

    x <- x + (1/n) field(x, k/n) for k = 0..n-1, x0 ~ N(0, I) from ``seed``.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        v = np.asarray(field_fn(x, k * dt), dtype=np.float64)
        if v.shape != x.shape:
            raise ValueError(
                f"field produced shape {v.shape}, state has {x.shape}")
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(
                f"non-finite field output at integration step {k}")
        x = x + dt * v
    return x


# ---------------------------------------------------------------------------
# mel interchange format: MEL1 header + row-major float32 frames

def write_mel(path: str | Path, mel: MelSpectrogram) -> None:
    """Binary layout: b'MEL1', then uint32 LE (n_mels, n_frames, sample_rate,
    hop_length), then n_frames*n_mels float32 LE values, frame-major."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = MEL_MAGIC + struct.pack(
        "<IIII", mel.n_mels, mel.n_frames, mel.sample_rate, mel.hop_length)
    payload = mel.frames.astype("<f4").tobytes(order="C")
    path.write_bytes(header + payload)


def read_mel(path: str | Path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if raw[:4] != MEL_MAGIC:
        raise ValueError(f"{path}: not a mel file (bad magic {raw[:4]!r})")
    n_mels, n_frames, sample_rate, hop = struct.unpack("<IIII", raw[4:20])
    expected = n_frames * n_mels * 4
    body = raw[20:]
    if len(body) != expected:
        raise ValueError(
            f"{path}: payload is {len(body)} bytes, header implies {expected}")
    frames = np.frombuffer(body, dtype="<f4").reshape(n_frames, n_mels)
    return MelSpectrogram(frames=frames.astype(np.float64),
                          sample_rate=sample_rate, hop_length=hop)
