"""Reference-based speech metrics and report containers.

SI-SDR is scale-invariant by construction; identical signals report the
documented 100 dB cap instead of infinity. STOI follows the original
published constants: 10 kHz analysis rate, 256-sample frames with 50%
overlap (512-point FFT), 15 one-third-octave bands from 150 Hz, 30-frame
segments, per-segment normalization, and clipping at the -15 dB SDR bound.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

__all__ = ["si_sdr", "stoi", "decs", "rtf", "MetricReport",
           "SI_SDR_CAP_DB"]

SI_SDR_CAP_DB = 100.0

# STOI constants (fixed by the original publication)
_STOI_FS = 10000
_STOI_FRAME = 256
_STOI_HOP = 128
_STOI_NFFT = 512
_STOI_NBANDS = 15
_STOI_FIRST_CF = 150.0
_STOI_SEG = 30
_STOI_BETA_DB = -15.0
_STOI_DYN_RANGE_DB = 40.0


def si_sdr(ref: np.ndarray, est: np.ndarray) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, capped at +-100."""
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    if ref.shape != est.shape:
        raise ValueError(
            f"length mismatch: reference {ref.shape[0]} vs estimate {est.shape[0]}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise ValueError("si_sdr needs a non-silent reference")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    residual = target - est
    num = float(np.dot(target, target))
    den = float(np.dot(residual, residual))
    if den == 0.0:
        return SI_SDR_CAP_DB
    if num == 0.0:  # estimate orthogonal to the reference
        return -SI_SDR_CAP_DB
    return min(max(10.0 * math.log10(num / den), -SI_SDR_CAP_DB),
               SI_SDR_CAP_DB)


def decs(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """Cosine similarity between two embeddings, in [-1, 1].

    Computed as dot / sqrt(dot(a,a) * dot(b,b)) so the aligned, opposite and
    orthogonal cases come out exactly 1, -1 and 0.
    """
    a = np.asarray(emb_a, dtype=np.float64).reshape(-1)
    b = np.asarray(emb_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"embedding sizes differ: {a.shape[0]} vs {b.shape[0]}")
    aa = float(np.dot(a, a))
    bb = float(np.dot(b, b))
    if aa == 0.0 or bb == 0.0:
        raise ValueError("decs requires non-zero embeddings")
    value = float(np.dot(a, b)) / math.sqrt(aa * bb)
    return min(1.0, max(-1.0, value))


def rtf(synthesis_seconds: float, audio_seconds: float) -> float:
    """Real-time factor: compute time divided by produced audio duration."""
    if audio_seconds <= 0:
        raise ValueError("audio duration must be positive")
    return synthesis_seconds / audio_seconds


# ---------------------------------------------------------------------------
# STOI

def _third_octave_bands() -> np.ndarray:
    """(bands, bins) selection matrix over the 512-point rfft at 10 kHz."""
    bin_freqs = np.fft.rfftfreq(_STOI_NFFT, d=1.0 / _STOI_FS)
    bands = np.zeros((_STOI_NBANDS, len(bin_freqs)))
    for k in range(_STOI_NBANDS):
        cf = _STOI_FIRST_CF * 2.0 ** (k / 3.0)
        lo, hi = cf / 2.0 ** (1.0 / 6.0), cf * 2.0 ** (1.0 / 6.0)
        bands[k] = (bin_freqs >= lo) & (bin_freqs < hi)
    return bands


def _stoi_frames(x: np.ndarray) -> np.ndarray:
    n = 1 + (len(x) - _STOI_FRAME) // _STOI_HOP
    idx = (np.arange(_STOI_FRAME)[None, :]
           + _STOI_HOP * np.arange(n)[:, None])
    return x[idx] * np.hanning(_STOI_FRAME)


def stoi(ref: np.ndarray, est: np.ndarray, sample_rate: int) -> float:
    """Short-time objective intelligibility of ``est`` against ``ref``."""
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    if ref.shape != est.shape:
        raise ValueError(
            f"length mismatch: reference {ref.shape[0]} vs estimate {est.shape[0]}")
    if sample_rate != _STOI_FS:
        g = math.gcd(sample_rate, _STOI_FS)
        ref = resample_poly(ref, _STOI_FS // g, sample_rate // g)
        est = resample_poly(est, _STOI_FS // g, sample_rate // g)
    min_len = _STOI_FRAME + (_STOI_SEG - 1) * _STOI_HOP
    if len(ref) < min_len:
        need = math.ceil(min_len * sample_rate / _STOI_FS)
        raise ValueError(
            f"signal too short for STOI: needs >= {need} samples at "
            f"{sample_rate} Hz ({min_len} at {_STOI_FS} Hz)")

    x_frames = _stoi_frames(ref)
    y_frames = _stoi_frames(est)
    # drop frames more than 40 dB below the loudest reference frame
    energies = np.sum(x_frames ** 2, axis=1)
    keep = energies > energies.max() * 10.0 ** (-_STOI_DYN_RANGE_DB / 10.0)
    x_frames, y_frames = x_frames[keep], y_frames[keep]
    if x_frames.shape[0] < _STOI_SEG:
        raise ValueError(
            f"signal too short for STOI after silence removal: "
            f"{x_frames.shape[0]} active frames, needs {_STOI_SEG}")

    bands = _third_octave_bands()
    x_spec = np.abs(np.fft.rfft(x_frames, n=_STOI_NFFT, axis=1)) ** 2
    y_spec = np.abs(np.fft.rfft(y_frames, n=_STOI_NFFT, axis=1)) ** 2
    x_tf = np.sqrt(x_spec @ bands.T)  # (frames, bands)
    y_tf = np.sqrt(y_spec @ bands.T)

    clip_gain = 10.0 ** (-_STOI_BETA_DB / 20.0)
    eps = np.finfo(np.float64).eps
    scores = []
    for m in range(_STOI_SEG - 1, x_tf.shape[0]):
        x_seg = x_tf[m - _STOI_SEG + 1: m + 1]  # (SEG, bands)
        y_seg = y_tf[m - _STOI_SEG + 1: m + 1]
        alpha = np.sqrt(np.sum(x_seg ** 2, axis=0)
                        / (np.sum(y_seg ** 2, axis=0) + eps))
        y_norm = np.minimum(y_seg * alpha, x_seg * (1.0 + clip_gain))
        xc = x_seg - x_seg.mean(axis=0)
        yc = y_norm - y_norm.mean(axis=0)
        num = np.sum(xc * yc, axis=0)
        den = np.sqrt(np.sum(xc ** 2, axis=0) * np.sum(yc ** 2, axis=0)) + eps
        scores.append(num / den)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# report container

@dataclass
class MetricReport:
    """Per-utterance metric values plus recomputable aggregates."""

    per_utterance: dict[str, dict[str, float]] = field(default_factory=dict)

    def add(self, utt_id: str, **values: float) -> None:
        self.per_utterance.setdefault(utt_id, {}).update(
            {k: float(v) for k, v in values.items()})

    def metric_names(self) -> list[str]:
        names: set[str] = set()
        for values in self.per_utterance.values():
            names.update(values)
        return sorted(names)

    def aggregate(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for name in self.metric_names():
            vals = np.array([v[name] for v in self.per_utterance.values()
                             if name in v])
            out[name] = {"mean": float(vals.mean()),
                         "std": float(vals.std()),
                         "count": int(vals.size)}
        return out

    def write_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for utt_id in sorted(self.per_utterance):
                fh.write(json.dumps({"id": utt_id,
                                     **self.per_utterance[utt_id]},
                                    ensure_ascii=False) + "\n")

    def write_csv_summary(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "mean", "std", "count"])
            for name, agg in self.aggregate().items():
                writer.writerow([name, repr(agg["mean"]), repr(agg["std"]),
                                 agg["count"]])

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "MetricReport":
        report = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            utt_id = record.pop("id")
            report.add(utt_id, **record)
        return report
