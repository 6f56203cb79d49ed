import numpy as np
import pytest

from mdtts.dsp import (
    Waveform,
    griffin_lim,
    istft,
    make_mel_filterbank,
    mel_project,
    pseudo_invert,
    read_wav,
    stft,
    wav_duration_seconds,
    write_wav,
)


def sine(freq, sr=16000, seconds=1.0, amp=0.8):
    t = np.arange(int(sr * seconds)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


class TestStft:
    def test_bin_center_sine_concentrates_energy(self):
        sr, n_fft = 16000, 512
        k = 32  # bin-center frequency k * sr / n_fft = 1000 Hz
        x = sine(k * sr / n_fft, sr=sr)
        # rectangular window: an integer-bin sine has all energy in bin k
        spec = stft(x, n_fft=n_fft, hop=n_fft, window="boxcar")
        frame = np.abs(spec[len(spec) // 2]) ** 2
        assert frame[k] / frame.sum() > 0.9
        # Hann window: closed-form DFT spreads the line over bins k-1..k+1
        spec_h = stft(x, n_fft=n_fft, hop=n_fft // 4, window="hann")
        frame_h = np.abs(spec_h[len(spec_h) // 2]) ** 2
        assert frame_h[k - 1:k + 2].sum() / frame_h.sum() > 0.99

    def test_zeros_give_zero_spectrogram(self):
        spec = stft(np.zeros(4000), n_fft=512, hop=128)
        assert np.all(spec == 0)

    def test_round_trip_cola(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=5000)
        spec = stft(x, n_fft=512, hop=128, window="hann")
        back = istft(spec, n_fft=512, hop=128, window="hann", length=len(x))
        rel = np.max(np.abs(back - x)) / np.max(np.abs(x))
        assert rel < 1e-6

    def test_short_signal_rejected(self):
        with pytest.raises(ValueError, match="short"):
            stft(np.zeros(100), n_fft=512, hop=128)

    def test_hop_larger_than_window_rejected(self):
        with pytest.raises(ValueError, match="hop"):
            stft(np.zeros(4000), n_fft=256, hop=512)


class TestMelFilterbank:
    def test_rows_are_triangular_and_ordered(self):
        fb = make_mel_filterbank(20, 512, 16000)
        assert fb.weights.shape == (20, 257)
        assert np.all(fb.weights >= 0)
        centers = [np.argmax(row) for row in fb.weights]
        assert centers == sorted(centers)
        for row in fb.weights:
            supp = np.flatnonzero(row)
            assert len(supp) > 0
            assert np.array_equal(supp, np.arange(supp[0], supp[-1] + 1))
            peak = np.argmax(row)
            assert np.all(np.diff(row[supp[0]:peak + 1]) >= -1e-12)
            assert np.all(np.diff(row[peak:supp[-1] + 1]) <= 1e-12)

    def test_covers_spectrum_without_gaps(self):
        fb = make_mel_filterbank(26, 512, 16000)
        bin_freqs = np.fft.rfftfreq(512, d=1 / 16000)
        inside = (bin_freqs > bin_freqs[1]) & (bin_freqs < 8000)
        coverage = fb.weights.sum(axis=0)
        assert np.all(coverage[inside] > 0)

    def test_zero_magnitude_gives_zero_mel(self):
        fb = make_mel_filterbank(10, 256, 8000)
        assert np.all(mel_project(np.zeros((5, 129)), fb) == 0)

    def test_single_bin_hits_only_covering_bands(self):
        fb = make_mel_filterbank(10, 256, 8000)
        mag = np.zeros((1, 129))
        mag[0, 40] = 1.0
        mel = mel_project(mag, fb)
        active = np.flatnonzero(mel[0])
        covering = np.flatnonzero(fb.weights[:, 40])
        assert np.array_equal(active, covering)

    def test_project_invert_project_idempotent_within_10_percent(self):
        fb = make_mel_filterbank(20, 512, 16000)
        rng = np.random.default_rng(1)
        for method in ("pinv", "nnls"):
            mag = np.abs(rng.normal(size=(6, 257)))
            mel = mel_project(mag, fb)
            back = pseudo_invert(mel, fb, method=method)
            mel2 = mel_project(back, fb)
            rel = np.linalg.norm(mel2 - mel) / np.linalg.norm(mel)
            assert rel < 0.10, method

    def test_dimension_mismatch_rejected(self):
        fb = make_mel_filterbank(10, 256, 8000)
        with pytest.raises(ValueError):
            mel_project(np.zeros((3, 100)), fb)
        with pytest.raises(ValueError):
            pseudo_invert(np.zeros((3, 11)), fb)


class TestGriffinLim:
    def test_zero_iters_is_seed_deterministic(self):
        mag = np.abs(stft(sine(440), n_fft=512, hop=128))
        a, ea = griffin_lim(mag, n_fft=512, hop=128, iters=0, seed=7)
        b, eb = griffin_lim(mag, n_fft=512, hop=128, iters=0, seed=7)
        c, _ = griffin_lim(mag, n_fft=512, hop=128, iters=0, seed=8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert ea == [] and eb == []

    def test_sine_reconstruction_correlates(self):
        x = sine(440, seconds=0.6)
        mag = np.abs(stft(x, n_fft=512, hop=128))
        rec, _ = griffin_lim(mag, n_fft=512, hop=128, iters=60, seed=3)
        n = min(len(rec), len(x))
        # boundary frames are underdetermined; compare the steady state
        trim = 16 * 128
        a = rec[trim:n - trim] - rec[trim:n - trim].mean()
        b = x[trim:n - trim] - x[trim:n - trim].mean()
        m = len(a)
        # normalized cross-correlation, maximized over lag (phase is free)
        corr = np.fft.irfft(np.fft.rfft(a, 2 * m) * np.conj(np.fft.rfft(b, 2 * m)))
        peak = np.max(np.abs(corr)) / (np.linalg.norm(a) * np.linalg.norm(b))
        assert peak > 0.99

    def test_consistency_error_non_increasing(self):
        rng = np.random.default_rng(4)
        for seed in range(3):
            mag = np.abs(rng.normal(size=(20, 257)))
            _, errors = griffin_lim(mag, n_fft=512, hop=128, iters=60, seed=seed)
            assert len(errors) == 60
            for prev, cur in zip(errors, errors[1:]):
                assert cur <= prev * (1 + 1e-9) + 1e-12

    def test_negative_iters_rejected(self):
        with pytest.raises(ValueError):
            griffin_lim(np.ones((4, 257)), iters=-1)


class TestWav:
    def test_round_trip(self, tmp_path):
        x = sine(220, sr=22050, seconds=0.25, amp=0.5)
        path = tmp_path / "tone.wav"
        clipped = write_wav(path, x, 22050)
        assert clipped == 0
        loaded = read_wav(path)
        assert loaded.sample_rate == 22050
        assert len(loaded.samples) == len(x)
        assert np.max(np.abs(loaded.samples - x)) < 1e-4  # 16-bit quantization

    def test_clipping_flagged_not_wrapped(self, tmp_path):
        x = np.array([0.0, 1.5, -2.0, 0.5])
        path = tmp_path / "clip.wav"
        clipped = write_wav(path, x, 16000)
        assert clipped == 2
        loaded = read_wav(path)
        assert np.max(loaded.samples) <= 1.0
        assert np.min(loaded.samples) >= -1.0

    def test_duration_from_header(self, tmp_path):
        path = tmp_path / "two_sec.wav"
        write_wav(path, np.zeros(32000), 16000)
        assert wav_duration_seconds(path) == pytest.approx(2.0)

    def test_waveform_validation(self):
        with pytest.raises(ValueError):
            Waveform(samples=np.zeros(10), sample_rate=0)
        w = Waveform(samples=np.zeros(8000), sample_rate=16000)
        assert w.duration == pytest.approx(0.5)
