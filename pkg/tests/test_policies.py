import numpy as np
import pytest

from streamkv.policies import (
    AttentionWindow,
    PolicyConfig,
    bias_vector,
    heavy_hitter_accumulate,
    heavy_hitter_decide,
    inf_mllm_decide,
    sink_recent_decide,
    sliding_window_decide,
    top_k_indices,
    window_mean_scores,
)

from oracles import naive_running_sum, naive_saddle_selection, naive_top_k, naive_window_mean

F32 = np.float32


def _window(rows):
    w = AttentionWindow(capacity=len(rows))
    for r in rows:
        w.push(np.asarray(r, dtype=F32))
    return w


def _random_window(rng, n, max_rows):
    """Ragged window: older rows cover fewer columns, newest covers n."""
    m = int(rng.integers(1, max_rows + 1))
    lengths = np.sort(rng.integers(1, n + 1, size=m))
    lengths[-1] = n
    w = AttentionWindow(capacity=m)
    rows = []
    for length in lengths:
        row = rng.dirichlet(np.ones(length)).astype(F32)
        rows.append(row)
        w.push(row)
    return w, rows


class TestWindowMeanScores:
    def test_two_row_example(self):
        w = _window([[0.2, 0.4, 0.1, 0.3], [0.4, 0.2, 0.1, 0.3]])
        np.testing.assert_allclose(window_mean_scores(w, 4, 2), [0.3, 0.3], atol=1e-7)

    def test_single_row_is_prefix(self):
        row = [0.1, 0.2, 0.3, 0.4]
        w = _window([row])
        np.testing.assert_allclose(window_mean_scores(w, 4, 2), row[:2], atol=1e-7)

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            window_mean_scores(AttentionWindow(4), 8, 2)

    def test_no_scorable_columns_rejected(self):
        w = _window([[0.5, 0.5]])
        with pytest.raises(ValueError):
            window_mean_scores(w, 2, 2)

    def test_matches_naive_ragged_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            n = int(rng.integers(3, 40))
            l = int(rng.integers(1, n))
            w, rows = _random_window(rng, n, 8)
            np.testing.assert_allclose(
                window_mean_scores(w, n, l), naive_window_mean(rows, n, l), atol=1e-6
            )


class TestBiasVector:
    def test_worked_example(self):
        np.testing.assert_allclose(bias_vector(6, 2, 0.1), [-0.075, -0.05, -0.025, 0.0], atol=1e-7)

    def test_zero_bias(self):
        np.testing.assert_array_equal(bias_vector(10, 3, 0.0), np.zeros(7, dtype=F32))

    def test_single_column(self):
        np.testing.assert_array_equal(bias_vector(5, 4, 2.5), [0.0])

    def test_span(self):
        rng = np.random.default_rng(22)
        for _ in range(50):
            n = int(rng.integers(3, 200))
            l = int(rng.integers(1, n - 1))
            b = float(rng.uniform(0, 2))
            d = bias_vector(n, l, b)
            cols = n - l
            assert abs((d.max() - d.min()) - b * (cols - 1) / cols) <= 1e-5
        with pytest.raises(ValueError):
            bias_vector(4, 4, 0.1)


class TestTopK:
    def test_tie_breaks_toward_newer(self):
        np.testing.assert_array_equal(top_k_indices([0.5, 0.5, 0.2], 1), [1])

    def test_k_zero(self):
        assert top_k_indices([1.0, 2.0], 0).size == 0

    def test_k_exceeding_length(self):
        np.testing.assert_array_equal(top_k_indices([3.0, 1.0], 5), [0, 1])

    def test_value_multiset_matches_sort_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(1000):
            size = int(rng.integers(1, 50))
            scores = rng.choice([0.1, 0.2, 0.3, 0.5], size=size).astype(F32)
            k = int(rng.integers(0, size + 1))
            got = top_k_indices(scores, k)
            expect = naive_top_k(list(scores), k)
            assert sorted(scores[got].tolist()) == sorted(scores[expect].tolist())
            np.testing.assert_array_equal(got, expect)


class TestSaddleDecide:
    def test_worked_example(self):
        w = _window([[0.30, 0.10, 0.20, 0.25, 0.15], [0.10, 0.30, 0.20, 0.15, 0.25]])
        cfg = PolicyConfig(recent_len=2, relevant_budget=1, bias=0.4)
        d = inf_mllm_decide(w, 5, cfg)
        np.testing.assert_array_equal(d.relevant, [2])
        np.testing.assert_array_equal(d.recent, [3, 4])
        np.testing.assert_array_equal(d.kept, [2, 3, 4])
        scores = window_mean_scores(w, 5, 2)
        np.testing.assert_allclose(scores, [0.2, 0.2, 0.2], atol=1e-6)
        np.testing.assert_allclose(bias_vector(5, 2, 0.4), [-0.2667, -0.1333, 0.0], atol=1e-4)

    def test_under_budget_keeps_all(self):
        w = _window([np.full(5, 0.2)])
        d = inf_mllm_decide(w, 5, PolicyConfig(recent_len=2, relevant_budget=3))
        np.testing.assert_array_equal(d.kept, np.arange(5))

    def test_uniform_scores_zero_bias_keeps_newest(self):
        w = _window([np.full(10, 0.1, dtype=F32)])
        cfg = PolicyConfig(recent_len=2, relevant_budget=3, bias=0.0)
        d = inf_mllm_decide(w, 10, cfg)
        np.testing.assert_array_equal(d.relevant, [5, 6, 7])

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            inf_mllm_decide(AttentionWindow(2), 10, PolicyConfig(recent_len=2, relevant_budget=3))

    def test_matches_naive_transcription(self):
        rng = np.random.default_rng(24)
        for _ in range(300):
            n = int(rng.integers(2, 128))
            l = int(rng.integers(1, 16))
            r = int(rng.integers(0, 32))
            b = float(rng.choice([0.0, 0.001, 0.1, 1.0]))
            w, rows = _random_window(rng, n, min(l, 6))
            cfg = PolicyConfig(recent_len=l, relevant_budget=r, bias=b)
            got = inf_mllm_decide(w, n, cfg).kept.tolist()
            expect = naive_saddle_selection(rows, n, l, r, b)
            assert got == expect

    def test_scale_covariance_of_selection(self):
        rng = np.random.default_rng(25)
        for _ in range(50):
            n = int(rng.integers(8, 64))
            l, r = 3, 4
            if n <= r + l:
                continue
            w, rows = _random_window(rng, n, 4)
            c = float(rng.uniform(0.2, 5.0))
            w2 = AttentionWindow(len(rows))
            for row in rows:
                w2.push(row * F32(c))
            b = 0.05
            d1 = inf_mllm_decide(w, n, PolicyConfig(recent_len=l, relevant_budget=r, bias=b))
            d2 = inf_mllm_decide(w2, n, PolicyConfig(recent_len=l, relevant_budget=r, bias=b * c))
            s1 = window_mean_scores(w, n, l)
            s2 = window_mean_scores(w2, n, l)
            np.testing.assert_allclose(s2, s1 * c, rtol=1e-4)
            np.testing.assert_array_equal(d1.kept, d2.kept)

    def test_bias_monotonicity_equal_scores(self):
        # equal mean scores: the newer column must win for any bias
        for b in (0.0, 0.01, 0.5, 2.0):
            w = _window([np.full(8, 0.125, dtype=F32)])
            d = inf_mllm_decide(w, 8, PolicyConfig(recent_len=2, relevant_budget=1, bias=b))
            np.testing.assert_array_equal(d.relevant, [5])

    def test_larger_bias_never_selects_older(self):
        rng = np.random.default_rng(26)
        biases = [0.0, 0.01, 0.1, 1.0]
        for _ in range(50):
            n = int(rng.integers(12, 80))
            l, r = 3, 5
            if n <= r + l:
                continue
            w, _ = _random_window(rng, n, 4)
            previous = None
            for b in biases:
                d = inf_mllm_decide(w, n, PolicyConfig(recent_len=l, relevant_budget=r, bias=b))
                ages = np.sort((n - l - 1) - d.relevant)[::-1]
                if previous is not None:
                    assert np.all(ages <= previous)
                previous = ages

    def test_invariant_kept_bounded_and_recent_included(self):
        rng = np.random.default_rng(27)
        for _ in range(100):
            n = int(rng.integers(2, 100))
            l = int(rng.integers(1, 10))
            r = int(rng.integers(0, 20))
            w, _ = _random_window(rng, n, 3)
            cfg = PolicyConfig(recent_len=l, relevant_budget=r)
            d = inf_mllm_decide(w, n, cfg)
            assert d.kept.size <= max(r + l, n if n <= r + l else 0) or d.kept.size <= r + l
            if n > r + l:
                assert d.kept.size <= r + l
            tail = np.arange(n - min(l, n), n)
            assert np.all(np.isin(tail, d.kept))
            assert np.intersect1d(d.relevant, d.recent).size == 0
            assert d.kept.min() >= 0 and d.kept.max() < n


class TestSlidingWindow:
    def test_basic(self):
        np.testing.assert_array_equal(sliding_window_decide(10, 3).kept, [7, 8, 9])

    def test_under_budget(self):
        np.testing.assert_array_equal(sliding_window_decide(3, 10).kept, [0, 1, 2])

    def test_composition_equals_single_application(self):
        # two rounds of windowing == one window at the end
        n1, added, budget = 17, 9, 6
        first = sliding_window_decide(n1, budget).kept
        n2 = first.size + added
        second = sliding_window_decide(n2, budget).kept
        survivors = np.concatenate([np.arange(n1)[first], np.arange(n1, n1 + added)])[second]
        oneshot = np.arange(n1 + added)[sliding_window_decide(n1 + added, budget).kept]
        np.testing.assert_array_equal(survivors, oneshot)


class TestSinkRecent:
    def test_basic(self):
        np.testing.assert_array_equal(sink_recent_decide(10, 2, 5).kept, [0, 1, 7, 8, 9])

    def test_under_budget(self):
        np.testing.assert_array_equal(sink_recent_decide(4, 2, 5).kept, [0, 1, 2, 3])

    def test_zero_sinks_reduce_to_sliding_window(self):
        for n in (3, 10, 25):
            got = sink_recent_decide(n, 0, 7).kept
            expect = sliding_window_decide(n, 7).kept
            np.testing.assert_array_equal(got, expect)

    def test_invalid_budget_rejected(self):
        with pytest.raises(ValueError):
            sink_recent_decide(10, 5, 5)


class TestHeavyHitter:
    def test_accumulate_extends(self):
        acc = heavy_hitter_accumulate(np.array([0.6, 0.4], dtype=F32), [0.3, 0.3, 0.4])
        np.testing.assert_allclose(acc, [0.9, 0.7, 0.4], atol=1e-6)

    def test_zero_acc_identity(self):
        row = np.array([0.2, 0.8], dtype=F32)
        np.testing.assert_array_equal(heavy_hitter_accumulate(np.zeros(0, dtype=F32), row), row)

    def test_accumulate_matches_running_sum_oracle(self):
        rng = np.random.default_rng(28)
        rows = []
        acc = np.zeros(0, dtype=F32)
        n = 1
        for _ in range(100):
            row = rng.dirichlet(np.ones(n)).astype(F32)
            rows.append(row)
            acc = heavy_hitter_accumulate(acc, row)
            n += int(rng.integers(0, 3))
        np.testing.assert_allclose(acc, naive_running_sum(rows), atol=1e-5)

    def test_decide_obvious_max(self):
        d = heavy_hitter_decide(np.array([5, 1, 2, 3], dtype=F32), 4, 1, 1)
        np.testing.assert_array_equal(d.kept, [0, 3])

    def test_decide_under_budget(self):
        d = heavy_hitter_decide(np.ones(4, dtype=F32), 4, 3, 1)
        np.testing.assert_array_equal(d.kept, np.arange(4))

    def test_decide_length_mismatch(self):
        with pytest.raises(ValueError):
            heavy_hitter_decide(np.ones(3, dtype=F32), 4, 1, 1)

    def test_decide_matches_naive_oracle(self):
        rng = np.random.default_rng(29)
        for _ in range(200):
            n = int(rng.integers(2, 60))
            l = int(rng.integers(1, 8))
            r = int(rng.integers(0, 12))
            acc = rng.random(n).astype(F32)
            d = heavy_hitter_decide(acc, n, r, l)
            if n <= r + l:
                np.testing.assert_array_equal(d.kept, np.arange(n))
            else:
                expect = sorted(set(naive_top_k(list(acc[: n - l]), r)) | set(range(n - l, n)))
                assert d.kept.tolist() == expect


class TestAttentionWindow:
    def test_capacity_drops_oldest(self):
        w = AttentionWindow(2)
        for size in (3, 4, 5):
            w.push(np.full(size, 1.0 / size, dtype=F32))
        assert len(w) == 2
        assert w.rows[0].size == 4

    def test_remap_keeps_prefix_alignment(self):
        w = AttentionWindow(3)
        w.push(np.array([0.5, 0.5], dtype=F32))
        w.push(np.array([0.25, 0.25, 0.25, 0.25], dtype=F32))
        w.remap([1, 3])
        assert [r.tolist() for r in w.rows] == [[0.5], [0.25, 0.25]]

    def test_push_rejects_shrinking_rows(self):
        w = AttentionWindow(3)
        w.push(np.full(4, 0.25, dtype=F32))
        with pytest.raises(ValueError):
            w.push(np.full(3, 1 / 3, dtype=F32))


class TestPolicyConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            PolicyConfig(recent_len=0)
        with pytest.raises(ValueError):
            PolicyConfig(bias=-0.1)
        with pytest.raises(ValueError):
            PolicyConfig(head_agg="median")

    def test_budget(self):
        assert PolicyConfig(recent_len=32, relevant_budget=2016).budget == 2048
