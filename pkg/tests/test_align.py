import itertools
import math

import numpy as np
import pytest

from mdtts.align import (
    AlignmentPath,
    DurationPredictorParams,
    alignment_scores,
    durations_from_log,
    length_regulate,
    mas,
    mas_path_value,
    predict_durations,
)
from mdtts.autodiff import Tape, Tensor, backward, numeric_gradient, reduce_sum, mul


def all_monotonic_paths(t_text, t_mel):
    """Every composition of t_mel frames into t_text positive durations."""
    for cuts in itertools.combinations(range(1, t_mel), t_text - 1):
        bounds = (0, *cuts, t_mel)
        yield tuple(bounds[k + 1] - bounds[k] for k in range(t_text))


def brute_force_best(score):
    t_text, t_mel = score.shape
    best = -math.inf
    for durations in all_monotonic_paths(t_text, t_mel):
        best = max(best, mas_path_value(score, durations))
    return best


class TestMas:
    def test_single_text_position_takes_all_frames(self):
        score = np.random.default_rng(0).normal(size=(1, 6))
        path = mas(score)
        assert path.durations == (6,)
        assert path.total_frames == 6

    def test_identity_dominant_diagonal(self):
        score = np.full((3, 3), -1.0)
        np.fill_diagonal(score, 10.0)
        assert mas(score).durations == (1, 1, 1)
        # matches the exhaustive enumeration
        assert mas_path_value(score, mas(score).durations) == brute_force_best(score)

    def test_matches_brute_force_on_random_4x6(self):
        for seed in range(200):
            score = np.random.default_rng(seed).normal(size=(4, 6))
            path = mas(score)
            assert mas_path_value(score, path.durations) == pytest.approx(
                brute_force_best(score), abs=1e-12)

    def test_matches_brute_force_all_small_sizes(self):
        rng = np.random.default_rng(42)
        for t_text in range(1, 6):
            for t_mel in range(t_text, 9):
                for _ in range(8):
                    score = rng.normal(size=(t_text, t_mel))
                    path = mas(score)
                    assert sum(path.durations) == t_mel
                    assert all(d >= 1 for d in path.durations)
                    assert mas_path_value(score, path.durations) == pytest.approx(
                        brute_force_best(score), abs=1e-12)

    def test_too_few_frames_rejected(self):
        with pytest.raises(ValueError, match="surjective"):
            mas(np.zeros((4, 3)))

    def test_tie_break_prefers_staying(self):
        # backtracking stays on the current text position at ties, so
        # surplus frames of an all-equal score land on the last position
        score = np.zeros((2, 4))
        assert mas(score).durations == (1, 3)

    def test_deterministic(self):
        score = np.random.default_rng(9).normal(size=(5, 8))
        assert mas(score).durations == mas(score).durations


class TestAlignmentPath:
    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            AlignmentPath(durations=(0, 2), total_frames=2)
        with pytest.raises(ValueError):
            AlignmentPath(durations=(1, 2), total_frames=4)


def test_alignment_scores_are_negative_squared_distances():
    text = np.array([[0.0, 0.0], [1.0, 1.0]])
    mel = np.array([[0.0, 0.0], [1.0, 0.0]])
    s = alignment_scores(text, mel)
    assert s.shape == (2, 2)
    assert s[0, 0] == 0.0
    assert s[0, 1] == -1.0
    assert s[1, 0] == -2.0
    assert s[1, 1] == -1.0


class TestDurationPredictor:
    def test_output_length_matches_input(self):
        params = DurationPredictorParams.init(4, 6, np.random.default_rng(0))
        h = Tensor(np.random.default_rng(1).normal(size=(7, 4)))
        out = predict_durations(h, params)
        assert out.shape == (7, 1)

    def test_perfect_predictor_has_zero_loss(self):
        # MSE of a prediction against itself
        target = np.log(np.array([1.0, 2.0, 3.0]))
        mse = float(np.mean((target - target) ** 2))
        assert mse == 0.0

    def test_rounding_rule(self):
        assert durations_from_log([0.0]) == [1]
        assert durations_from_log([math.log(2.4)]) == [2]
        assert durations_from_log([-5.0]) == [1]
        assert durations_from_log([math.log(7.0)]) == [7]

    def test_gradients_match_finite_differences(self):
        for seed in range(20):
            rng = np.random.default_rng(600 + seed)
            params = DurationPredictorParams.init(3, 5, rng)
            h = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            w = rng.normal(size=(4, 1))

            def f():
                return reduce_sum(mul(predict_durations(h, params), Tensor(w))).item()

            with Tape() as tape:
                loss = reduce_sum(mul(predict_durations(h, params), Tensor(w)))
            grads = backward(tape, loss)
            for t in (h, params.w1, params.norm_gamma, params.w2, params.b2):
                fd = numeric_gradient(f, t)
                an = grads[t.id].data
                denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-4)
                assert np.max(np.abs(fd - an) / denom) < 1e-4


class TestLengthRegulate:
    def test_all_ones_is_identity(self):
        x = Tensor(np.random.default_rng(2).normal(size=(4, 3)))
        out = length_regulate(x, [1, 1, 1, 1])
        assert np.array_equal(out.data, x.data)

    def test_repeat_pattern(self):
        x = Tensor([[1.0, 0.0], [0.0, 1.0]])
        out = length_regulate(x, [2, 3])
        assert np.array_equal(
            out.data, [[1, 0], [1, 0], [0, 1], [0, 1], [0, 1]])

    def test_row_count_is_duration_sum(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            t = int(rng.integers(1, 6))
            x = Tensor(rng.normal(size=(t, 4)))
            durations = [int(d) for d in rng.integers(1, 5, size=t)]
            assert length_regulate(x, durations).shape == (sum(durations), 4)

    def test_accepts_alignment_path(self):
        x = Tensor(np.eye(2))
        path = AlignmentPath(durations=(1, 2), total_frames=3)
        assert length_regulate(x, path).shape == (3, 2)

    def test_zero_duration_rejected(self):
        with pytest.raises(ValueError):
            length_regulate(Tensor(np.eye(2)), [1, 0])
