import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdr.bench import (
    BASELINES,
    CATEGORIES,
    CorpusSpec,
    ThresholdSettings,
    allocate,
    bootstrap_means,
    calibration_ece,
    compare_all,
    consistency,
    corpus_features,
    draw_engines,
    generate_corpus,
    oracle_labels,
    read_metrics_csv,
    routing_confusion,
    run_baseline,
    simulate_baseline,
    train_policies,
    write_metrics_csv,
    _consistency_rows,
)
from cdr.engines import EngineSet, utility
from cdr.errors import InvalidInputError
from cdr.rng import stream
from cdr.routing import RoutingDecision, Strategy
from cdr.serialize import dumps_corpus

FAST, SLOW = Strategy.FAST, Strategy.SLOW


@pytest.fixture(scope="module")
def small():
    corpus = generate_corpus(CorpusSpec(n_queries=300, seed=7))
    train = generate_corpus(CorpusSpec(n_queries=300, seed=7), split=1)
    policies = train_policies(train, max_depth=3)
    return corpus, policies


@pytest.fixture(scope="module")
def small_report(small):
    corpus, policies = small
    return compare_all(corpus, policies=policies, repeats=4, seed=3, n_resamples=500)


class TestCorpus:
    def test_deterministic(self):
        a = generate_corpus(CorpusSpec(n_queries=10, seed=42))
        b = generate_corpus(CorpusSpec(n_queries=10, seed=42))
        assert dumps_corpus(a) == dumps_corpus(b)

    def test_splits_differ(self):
        a = generate_corpus(CorpusSpec(n_queries=10, seed=42))
        b = generate_corpus(CorpusSpec(n_queries=10, seed=42), split=1)
        assert {q.id for q in a}.isdisjoint({q.id for q in b})

    def test_factual_noise_free_all_fast(self):
        engines = EngineSet()
        corpus = generate_corpus(CorpusSpec(n_queries=200, seed=1, category_mix={"factual": 1.0}, noise_scale=0.0))
        for q in corpus:
            z = q.latent_complexity
            assert utility(engines.fast, z, engines.utility) > utility(engines.slow, z, engines.utility)
            assert q.oracle_label is FAST

    def test_category_counts(self):
        spec = CorpusSpec(n_queries=1000, seed=3)
        counts = {c: 0 for c in CATEGORIES}
        for q in generate_corpus(spec):
            counts[q.category] += 1
        for c in CATEGORIES:
            assert abs(counts[c] - 1000 * spec.category_mix[c]) <= 1

    @given(st.integers(0, 5000), st.lists(st.floats(0.01, 1), min_size=5, max_size=5))
    def test_allocation(self, n, raw):
        mix = dict(zip(CATEGORIES, (v / sum(raw) for v in raw)))
        counts = allocate(n, mix)
        assert sum(counts.values()) == n
        assert all(abs(counts[c] - n * mix[c]) < 1 for c in CATEGORIES)

    def test_bad_mix(self):
        with pytest.raises(InvalidInputError, match="category_mix"):
            CorpusSpec(category_mix={"factual": 0.9})

    def test_features_track_complexity(self):
        corpus = generate_corpus(CorpusSpec(n_queries=400, seed=5))
        x = corpus_features(corpus)
        z = np.array([q.latent_complexity for q in corpus])
        assert np.corrcoef(x[:, 0], z)[0, 1] < -0.8
        assert np.corrcoef(x[:, 3], z)[0, 1] > 0.8
        assert np.corrcoef(x[:, 1], z)[0, 1] > 0.5

    def test_both_labels_present(self):
        y = oracle_labels(generate_corpus(CorpusSpec(n_queries=300, seed=5)))
        assert 0 < y.mean() < 1


class TestConsistency:
    def test_all_identical(self):
        assert consistency([[3] * 10]) == 1.0

    def test_five_five_split(self):
        assert consistency([[0] * 5 + [1] * 5]) == float(Fraction(20, 45))

    def test_all_distinct(self):
        assert consistency([list(range(10))]) == 0.0

    def test_needs_two_runs(self):
        with pytest.raises(InvalidInputError):
            consistency([[1]])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 3), min_size=10, max_size=10), min_size=1, max_size=8),
           st.permutations(range(4)))
    def test_relabel_invariance_and_fast_path(self, answers, perm):
        c = consistency(answers)
        assert 0.0 <= c <= 1.0
        assert consistency([[perm[a] for a in run] for run in answers]) == c
        assert float(np.mean(_consistency_rows(np.array(answers)))) == pytest.approx(c, abs=1e-15)
        assert (c == 1.0) == all(len(set(r)) == 1 for r in answers)


class TestCalibration:
    def test_perfect(self):
        assert calibration_ece([1.0] * 5, [True] * 5) == 0.0

    def test_one_bin(self):
        assert calibration_ece([0.9] * 10, [True, False] * 5, bins=1) == pytest.approx(0.4, abs=1e-15)

    def test_two_bins(self):
        conf = [0.2] * 10 + [0.8] * 10
        hit = [False] * 10 + [True] * 10
        assert calibration_ece(conf, hit, bins=10) == pytest.approx(0.2, abs=1e-15)

    def test_zero_when_bins_match(self):
        conf = [0.25] * 4 + [0.75] * 4
        hit = [True, False, False, False, True, True, True, False]
        assert calibration_ece(conf, hit) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            calibration_ece([0.5, 0.5], [True])

    def test_bin_oracle(self):
        g = stream(2, 0)
        conf = g.random(500)
        hit = g.random(500) < conf
        want = 0.0
        for b in range(10):
            lo, hi = b / 10, (b + 1) / 10
            m = (conf >= lo) & ((conf < hi) if b < 9 else (conf <= hi))
            if m.any():
                want += m.mean() * abs(conf[m].mean() - hit[m].mean())
        assert calibration_ece(conf, hit) == pytest.approx(want, abs=1e-12)


class TestConfusion:
    def test_identity(self):
        labels = [FAST, SLOW, SLOW, FAST]
        r = routing_confusion(labels, labels)
        assert (r.routing_accuracy, r.false_positive_rate, r.false_negative_rate) == (1.0, 0.0, 0.0)

    def test_all_slow_vs_all_fast(self):
        r = routing_confusion([SLOW] * 3, [FAST] * 3)
        assert r.false_positive_rate == 1.0

    def test_accepts_decisions(self):
        d = [RoutingDecision(FAST, 0.1, 0.5), RoutingDecision(SLOW, 0.9, 0.5)]
        r = routing_confusion(d, ["fast", "fast"])
        assert (r.n_match, r.n_false_positive, r.n_false_negative) == (1, 1, 0)

    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=300))
    def test_components_sum_exactly(self, pairs):
        r = routing_confusion([SLOW if a else FAST for a, _ in pairs], [SLOW if b else FAST for _, b in pairs])
        assert sum(r.fractions()) == 1
        assert r.n_match + r.n_false_positive + r.n_false_negative == r.n

    def test_by_category(self):
        r = routing_confusion([FAST, SLOW, SLOW], [FAST, FAST, SLOW], ["a", "a", "b"])
        assert r.by_category["a"].n == 2 and r.by_category["a"].n_false_positive == 1
        assert r.by_category["b"].routing_accuracy == 1.0

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            routing_confusion([FAST], [FAST, SLOW])


class TestBaselines:
    def test_unknown(self, small):
        with pytest.raises(InvalidInputError):
            run_baseline(small[0], "oracle")

    def test_uniform_fast_fraction(self, small):
        assert run_baseline(small[0], "uniform_fast", repeats=2).fast_fraction == 1.0

    def test_random_fraction(self, small):
        m = run_baseline(small[0], "random", repeats=10, seed=1)
        assert abs(m.fast_fraction - 0.5) <= 3 * math.sqrt(0.25 / 3000)

    def test_cdr_needs_policy(self, small):
        with pytest.raises(InvalidInputError):
            run_baseline(small[0], "cdr_neural")

    def test_single_repeat_has_no_consistency(self, small):
        assert run_baseline(small[0], "uniform_slow", repeats=1).consistency is None

    def test_length_based_rule(self, small):
        corpus = small[0]
        draws = draw_engines(corpus, EngineSet(), 2, 0)
        run = simulate_baseline(corpus, "length_based", draws, 0)
        lengths = np.array([q.record.concept_count for q in corpus])
        np.testing.assert_array_equal(run.slow[:, 0], lengths > np.median(lengths))

    def test_confidence_cascade_cost(self, small):
        corpus = small[0]
        draws = draw_engines(corpus, EngineSet(), 2, 0)
        run = simulate_baseline(corpus, "confidence_based", draws, 0)
        esc = draws.confidence[0] < 0.7
        np.testing.assert_array_equal(run.slow, esc)
        np.testing.assert_array_equal(run.tokens, np.where(esc, draws.tokens[0] + draws.tokens[1], draws.tokens[0]))

    def test_mixture_token_identity(self, small):
        corpus, policies = small
        draws = draw_engines(corpus, EngineSet(), 3, 0)
        for b in ("random", "length_based", "cdr_tree", "cdr_linear"):
            run = simulate_baseline(corpus, b, draws, 0, policies)
            want = np.where(run.slow, draws.tokens[1], draws.tokens[0])
            np.testing.assert_array_equal(run.tokens, want)

    def test_adaptive_threshold_moves_and_costs_exploration(self, small):
        corpus, policies = small
        draws = draw_engines(corpus, EngineSet(), 2, 0)
        static = simulate_baseline(corpus, "cdr_neural", draws, 0, policies)
        adaptive = simulate_baseline(corpus, "cdr_neural", draws, 0, policies,
                                     threshold=ThresholdSettings(adapt=True, epsilon=0.2))
        assert adaptive.tau_trace is not None and adaptive.tau_trace.shape == (2, len(corpus))
        assert adaptive.tau_trace[0, 0] == 0.5
        steps = np.abs(np.diff(adaptive.tau_trace, axis=1))
        assert np.all(np.isclose(steps, 0) | np.isclose(steps, 0.01))
        assert static.tau_trace is None
        routed = np.where(adaptive.slow, draws.tokens[1], draws.tokens[0])
        assert np.all(adaptive.tokens >= routed) and np.any(adaptive.tokens > routed)

    def test_adaptive_is_deterministic(self, small):
        corpus, policies = small
        draws = draw_engines(corpus, EngineSet(), 2, 0)
        s = ThresholdSettings(adapt=True)
        a = simulate_baseline(corpus, "cdr_tree", draws, 5, policies, threshold=s)
        b = simulate_baseline(corpus, "cdr_tree", draws, 5, policies, threshold=s)
        np.testing.assert_array_equal(a.tau_trace, b.tau_trace)


class TestBootstrap:
    def test_matches_explicit_resampling(self):
        vals = stream(1, 0).normal(size=(37, 3))
        got = bootstrap_means(vals, 1200, seed=9, chunk=500)
        # the same index draws, resampled explicitly
        want = []
        for c, start in enumerate(range(0, 1200, 500)):
            b = min(500, 1200 - start)
            idx = stream(9, 5, c).integers(0, 37, size=(b, 37))
            want.extend(vals[i].mean(axis=0) for i in idx)
        np.testing.assert_allclose(got, np.array(want), rtol=0, atol=1e-13)

    def test_constant_column(self):
        out = bootstrap_means(np.full((20, 1), 2.5), 100, seed=0)
        np.testing.assert_allclose(out, 2.5, rtol=0, atol=1e-15)


class TestCompareAll:
    def test_all_baselines_present(self, small_report):
        assert [r.baseline for r in small_report.rows] == list(BASELINES)

    def test_savings_ratio(self, small_report):
        r = small_report.row("uniform_fast")
        assert abs(r.token_savings_vs_uniform_slow - (1 - 145 / 342)) <= 0.03

    def test_cdr_between_uniforms(self, small_report):
        lo = small_report.row("uniform_fast").mean_tokens
        hi = small_report.row("uniform_slow").mean_tokens
        for b in ("cdr_linear", "cdr_neural", "cdr_tree"):
            assert lo < small_report.row(b).mean_tokens < hi

    def test_ci_brackets_point(self, small_report):
        for r in small_report.rows:
            assert r.accuracy_ci_low <= r.accuracy <= r.accuracy_ci_high
            assert r.tokens_ci_low <= r.mean_tokens <= r.tokens_ci_high

    def test_gain_reference_rows(self, small_report):
        assert small_report.row("uniform_fast").acc_gain_vs_uniform_fast == 0.0
        assert small_report.row("uniform_slow").token_savings_vs_uniform_slow == 0.0

    def test_ranges(self, small_report):
        for r in small_report.rows:
            assert 0 <= r.accuracy <= 1 and 0 <= r.consistency <= 1 and 0 <= r.ece <= 1
            assert 0 <= r.fast_fraction <= 1
            assert r.routing_accuracy + r.false_positive_rate + r.false_negative_rate == pytest.approx(1.0)

    def test_same_seed_same_bytes(self, small, small_report):
        corpus, policies = small
        again = compare_all(corpus, policies=policies, repeats=4, seed=3, n_resamples=500)
        assert again.metrics_csv() == small_report.metrics_csv()
        assert again.confusion_csv() == small_report.confusion_csv()

    def test_paired_engine_draws(self, small):
        corpus = small[0]
        a = draw_engines(corpus, EngineSet(), 2, 4)
        b = draw_engines(corpus[::-1], EngineSet(), 2, 4)
        np.testing.assert_array_equal(a.correct, b.correct[:, ::-1])
        np.testing.assert_array_equal(a.tokens, b.tokens[:, ::-1])

    def test_csv_round_trip(self, small_report):
        text = small_report.metrics_csv()
        assert read_metrics_csv(text) == small_report.rows
        assert write_metrics_csv(read_metrics_csv(text)) == text

    def test_confusion_csv_has_reference(self, small_report):
        last = small_report.confusion_csv().strip().splitlines()[-1]
        assert last.startswith("reference,all,,0.873,0.082,0.045")

    def test_mixture_tokens_within_3_sigma(self, small, small_report):
        corpus, _ = small
        run = small_report.runs["cdr_tree"]
        draws = draw_engines(corpus, EngineSet(), 4, 3)
        f = run.slow.mean()
        ef, es = draws.tokens[0].mean(), draws.tokens[1].mean()
        predicted = (1 - f) * ef + f * es
        sd = np.sqrt((1 - f) * draws.tokens[0].var() + f * draws.tokens[1].var()) / np.sqrt(run.tokens.size)
        assert abs(run.tokens.mean() - predicted) <= 3 * sd + 3 * abs(es - ef) * np.sqrt(f * (1 - f) / run.slow.size)
