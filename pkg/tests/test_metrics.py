import numpy as np
import pytest

from mdtts.metrics import MetricReport, SI_SDR_CAP_DB, decs, rtf, si_sdr, stoi


def speechlike(seconds=2.5, sr=16000, seed=0):
    """Harmonic tone with drifting pitch and syllabic amplitude modulation."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(sr * seconds)) / sr
    f0 = 120.0 + 40.0 * np.sin(2 * np.pi * 0.7 * t)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    x = sum(np.sin(k * phase) / k for k in range(1, 9))
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * 3.1 * t + rng.uniform(0, np.pi))
    return 0.5 * x * envelope / np.max(np.abs(x))


class TestSiSdr:
    def test_identical_signals_hit_cap(self):
        x = speechlike()
        assert si_sdr(x, x) == SI_SDR_CAP_DB

    def test_scaled_estimate_equals_identity_case(self):
        x = speechlike()
        assert si_sdr(x, 2.0 * x) == si_sdr(x, x) == SI_SDR_CAP_DB

    def test_hand_case_zero_db(self):
        assert si_sdr(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == 0.0

    def test_scale_invariance_below_1e9(self):
        rng = np.random.default_rng(1)
        ref = speechlike(seed=2)
        est = ref + 0.1 * rng.normal(size=ref.shape)
        base = si_sdr(ref, est)
        for c in (0.1, 2.0, 10.0):
            assert abs(si_sdr(ref, c * est) - base) < 1e-9

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError, match="non-silent"):
            si_sdr(np.zeros(100), np.ones(100))

    def test_orthogonal_estimate_hits_negative_cap(self):
        value = si_sdr(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert value == -SI_SDR_CAP_DB

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            si_sdr(np.ones(10), np.ones(11))


class TestStoi:
    def test_identity_is_one(self):
        x = speechlike()
        assert stoi(x, x, 16000) == pytest.approx(1.0, abs=1e-6)

    def test_bounded_above_by_one(self):
        rng = np.random.default_rng(3)
        ref = speechlike(seed=4)
        for snr_db in (0.0, 10.0):
            noise = rng.normal(size=ref.shape)
            noise *= np.linalg.norm(ref) / (np.linalg.norm(noise)
                                            * 10 ** (snr_db / 20))
            assert stoi(ref, ref + noise, 16000) <= 1.0 + 1e-9

    def test_independent_noise_scores_low(self):
        ref = speechlike(seed=5)
        noise = np.random.default_rng(6).normal(size=ref.shape)
        noise *= 0.5 / np.max(np.abs(noise))
        assert stoi(ref, noise, 16000) < 0.2

    def test_monotone_in_snr(self):
        ref = speechlike(seed=7)
        noise = np.random.default_rng(8).normal(size=ref.shape)
        noise /= np.linalg.norm(noise)
        scores = []
        for snr_db in np.linspace(-10, 30, 9):
            scaled = noise * np.linalg.norm(ref) / 10 ** (snr_db / 20)
            scores.append(stoi(ref, ref + scaled, 16000))
        assert all(b > a for a, b in zip(scores, scores[1:])), scores

    def test_too_short_rejected_with_minimum(self):
        with pytest.raises(ValueError, match="needs >="):
            stoi(np.ones(1000), np.ones(1000), 16000)

    def test_native_10k_path(self):
        x = speechlike(sr=10000)
        assert stoi(x, x, 10000) == pytest.approx(1.0, abs=1e-6)


class TestDecs:
    def test_identity_exact_one(self):
        a = np.array([1.0, 2.0, 3.0, -0.7])
        assert decs(a, a) == 1.0

    def test_opposite_exact_minus_one(self):
        a = np.array([0.3, -1.2, 2.4])
        assert decs(a, -a) == -1.0

    def test_orthogonal_exact_zero(self):
        assert decs(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_positive_scale_invariant(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=8), rng.normal(size=8)
        # power-of-two scaling is exact in IEEE arithmetic
        for c in (0.5, 2.0, 1024.0):
            assert decs(a, c * b) == decs(a, b)
        for c in (0.1, 3.0, 10.0):
            assert decs(a, c * b) == pytest.approx(decs(a, b), abs=1e-15)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="non-zero"):
            decs(np.zeros(4), np.ones(4))

    def test_within_bounds(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            v = decs(rng.normal(size=16), rng.normal(size=16))
            assert -1.0 <= v <= 1.0


class TestRtf:
    def test_basic_ratio(self):
        assert rtf(1.0, 10.0) == pytest.approx(0.1)

    def test_equal_times(self):
        assert rtf(2.5, 2.5) == 1.0

    def test_zero_audio_rejected(self):
        with pytest.raises(ValueError):
            rtf(1.0, 0.0)


class TestMetricReport:
    def test_aggregates_recomputable(self):
        report = MetricReport()
        report.add("a", stoi=0.9, si_sdr=10.0)
        report.add("b", stoi=0.7, si_sdr=20.0)
        report.add("c", stoi=0.8)
        agg = report.aggregate()
        assert agg["stoi"]["mean"] == pytest.approx(0.8)
        assert agg["si_sdr"]["count"] == 2
        assert agg["si_sdr"]["mean"] == pytest.approx(15.0)
        assert agg["stoi"]["std"] == pytest.approx(np.std([0.9, 0.7, 0.8]))

    def test_jsonl_round_trip(self, tmp_path):
        report = MetricReport()
        report.add("utt1", stoi=0.91234567, decs=0.5)
        report.add("utt2", stoi=0.7)
        path = tmp_path / "metrics.jsonl"
        report.write_jsonl(path)
        loaded = MetricReport.read_jsonl(path)
        assert loaded.per_utterance == report.per_utterance

    def test_csv_summary_parse_back(self, tmp_path):
        import csv

        report = MetricReport()
        report.add("u1", m=1.25)
        report.add("u2", m=2.5)
        path = tmp_path / "summary.csv"
        report.write_csv_summary(path)
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert float(rows[0]["mean"]) == report.aggregate()["m"]["mean"]
