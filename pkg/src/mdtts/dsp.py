"""Deterministic DSP: STFT/ISTFT, mel filterbank, Griffin-Lim, WAV files.

The waveform path stands in for a neural vocoder so synthesis, metrics and
the dataset pipeline run end to end on CPU. All transforms are centered
(reflection padding) and use a periodic Hann window by default; hop at a
quarter of the window keeps the overlap-add reconstruction exact.
"""

from __future__ import annotations

import logging
import math
import wave as wave_module
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import nnls as _nnls

log = logging.getLogger(__name__)

__all__ = [
    "Waveform", "stft", "istft", "MelFilterbank", "make_mel_filterbank",
    "mel_project", "pseudo_invert", "griffin_lim", "write_wav", "read_wav",
]


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _window(name: str, n_fft: int) -> np.ndarray:
    if name == "hann":
        # periodic Hann: exact constant overlap-add at hop = n_fft / 4
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft))
    if name == "boxcar":
        return np.ones(n_fft)
    raise ValueError(f"unknown window {name!r} (use 'hann' or 'boxcar')")


def stft(samples: np.ndarray, n_fft: int = 1024, hop: int = 256,
         window: str = "hann") -> np.ndarray:
    """Centered short-time Fourier transform, shape (frames, n_fft//2 + 1)."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if hop > n_fft:
        raise ValueError(f"hop {hop} must be <= n_fft {n_fft}")
    pad = n_fft // 2
    if len(samples) <= pad:
        raise ValueError(
            f"signal of {len(samples)} samples is shorter than one centered "
            f"frame (needs > {pad})")
    w = _window(window, n_fft)
    padded = np.pad(samples, pad, mode="reflect")
    n_frames = 1 + (len(padded) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(padded[idx] * w, axis=1)


def istft(spec: np.ndarray, n_fft: int = 1024, hop: int = 256,
          window: str = "hann", length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    spec = np.asarray(spec)
    n_frames = spec.shape[0]
    w = _window(window, n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1)
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    den = np.zeros(total)
    for m in range(n_frames):
        sl = slice(m * hop, m * hop + n_fft)
        out[sl] += frames[m] * w
        den[sl] += w * w
    den = np.maximum(den, 1e-12)
    out /= den
    pad = n_fft // 2
    out = out[pad:]
    target = length if length is not None else max(total - 2 * pad, 0)
    if len(out) >= target:
        out = out[:target]
    else:
        out = np.pad(out, (0, target - len(out)))
    return out


@dataclass
class MelFilterbank:
    """Triangular mel bands over rfft bins, rows ordered by center frequency."""

    weights: np.ndarray  # (n_mels, n_fft//2 + 1)
    sample_rate: int
    n_fft: int
    f_min: float
    f_max: float


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def make_mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                        f_min: float = 0.0,
                        f_max: float | None = None) -> MelFilterbank:
    if f_max is None:
        f_max = sample_rate / 2.0
    if not 0 <= f_min < f_max <= sample_rate / 2.0:
        raise ValueError(f"bad mel range [{f_min}, {f_max}] at {sample_rate} Hz")
    mel_pts = np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bin_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    weights = np.zeros((n_mels, len(bin_freqs)))
    for m in range(n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (bin_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - center, 1e-12)
        weights[m] = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(weights=weights, sample_rate=sample_rate,
                         n_fft=n_fft, f_min=f_min, f_max=f_max)


def mel_project(magnitude: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Project a (frames, bins) magnitude spectrogram onto mel bands."""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if magnitude.shape[1] != fb.weights.shape[1]:
        raise ValueError(
            f"magnitude has {magnitude.shape[1]} bins, filterbank expects "
            f"{fb.weights.shape[1]}")
    return magnitude @ fb.weights.T


def pseudo_invert(mel: np.ndarray, fb: MelFilterbank,
                  method: str = "pinv") -> np.ndarray:
    """Estimate a non-negative magnitude spectrogram from mel frames.

    ``pinv`` (default): Moore-Penrose least squares clipped at zero, one
    matmul per call. ``nnls``: exact non-negative least squares per frame,
    slower but residual-free.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.shape[1] != fb.weights.shape[0]:
        raise ValueError(
            f"mel has {mel.shape[1]} bands, filterbank has {fb.weights.shape[0]}")
    if method == "pinv":
        inv = np.linalg.pinv(fb.weights)  # (bins, n_mels)
        return np.maximum(mel @ inv.T, 0.0)
    if method == "nnls":
        out = np.empty((mel.shape[0], fb.weights.shape[1]))
        for i, frame in enumerate(mel):
            out[i], _ = _nnls(fb.weights, frame)
        return out
    raise ValueError(f"unknown inversion method {method!r}")


def _peak_spans(row: np.ndarray):
    """Local peaks of a magnitude row with interpolated fractional offsets.

    Yields (peak_bin, lo, hi, delta): the bins [lo, hi] governed by the peak
    (expanding to the surrounding valleys) and the Grandke three-point
    frequency offset, which is exact for Hann-windowed stationary tones.
    """
    nbins = len(row)
    k = 1
    while k < nbins - 1:
        if row[k] > row[k - 1] and row[k] >= row[k + 1] and row[k] > 1e-12:
            if row[k + 1] >= row[k - 1]:
                ratio = row[k + 1] / row[k]
                delta = (2.0 * ratio - 1.0) / (1.0 + ratio)
            else:
                ratio = row[k - 1] / row[k]
                delta = -(2.0 * ratio - 1.0) / (1.0 + ratio)
            lo = k
            while lo - 1 >= 0 and 0.0 < row[lo - 1] <= row[lo]:
                lo -= 1
            hi = k
            while hi + 1 < nbins and 0.0 < row[hi + 1] <= row[hi]:
                hi += 1
            yield k, lo, hi, delta
        k += 1


def _propagated_phase(magnitude: np.ndarray, n_fft: int, hop: int,
                      seed: int) -> np.ndarray:
    """Initial phase field: seeded random, with each spectral peak's lobe
    advanced frame to frame at the peak's interpolated frequency."""
    rng = np.random.default_rng(seed)
    frames, nbins = magnitude.shape
    rand = rng.uniform(0.0, 2.0 * np.pi, size=(frames, nbins))
    out = np.empty_like(rand)
    acc = rand[0].copy()
    first = rand[0].copy()
    for k, lo, hi, _ in _peak_spans(magnitude[0]):
        first[lo:hi + 1] = acc[k]
    out[0] = first
    acc = first
    for m in range(1, frames):
        row = magnitude[m]
        newrow = rand[m].copy()
        for k, lo, hi, delta in _peak_spans(row):
            newrow[lo:hi + 1] = acc[k] + hop * 2.0 * np.pi * (k + delta) / n_fft
        out[m] = newrow
        acc = newrow
    return out


def griffin_lim(magnitude: np.ndarray, n_fft: int = 1024, hop: int = 256,
                iters: int = 60, seed: int = 0,
                window: str = "hann") -> tuple[np.ndarray, list[float]]:
    """Iterative phase reconstruction from a (frames, bins) magnitude.

    ``iters=0`` is a plain inverse transform under seeded random phase. The
    first iteration estimates phase by propagating each spectral peak at its
    interpolated frequency (random phase elsewhere); later iterations are
    alternating projections, accepted only when they do not increase the
    spectral-consistency error || |STFT(w)| - magnitude ||_F. Returns the
    waveform and the per-iteration error sequence (non-increasing).
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if iters == 0:
        rng = np.random.default_rng(seed)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=magnitude.shape)
        return istft(magnitude * np.exp(1j * phase), n_fft=n_fft, hop=hop,
                     window=window), []
    spec = magnitude * np.exp(
        1j * _propagated_phase(magnitude, n_fft, hop, seed))
    errors: list[float] = []
    best_err = math.inf
    best_wav: np.ndarray | None = None
    for _ in range(iters):
        wav = istft(spec, n_fft=n_fft, hop=hop, window=window)
        rebuilt = stft(wav, n_fft=n_fft, hop=hop, window=window)
        err = float(np.linalg.norm(np.abs(rebuilt) - magnitude))
        if err < best_err:
            best_err = err
            best_wav = wav
        errors.append(best_err)
        spec = magnitude * np.exp(1j * np.angle(rebuilt))
    assert best_wav is not None
    return best_wav, errors


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> int:
    """Write mono 16-bit PCM; values outside [-1, 1] are clipped and counted."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    clipped = int(np.count_nonzero((samples < -1.0) | (samples > 1.0)))
    if clipped:
        log.warning("clipping %d samples while writing %s", clipped, path)
    limited = np.clip(samples, -1.0, 1.0)
    pcm = np.round(limited * 32767.0).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave_module.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())
    return clipped


def read_wav(path: str | Path) -> Waveform:
    with wave_module.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sr = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples=samples, sample_rate=sr)


def wav_duration_seconds(path: str | Path) -> float:
    """Duration from the WAV header without reading the payload."""
    with wave_module.open(str(path), "rb") as fh:
        return fh.getnframes() / fh.getframerate()
