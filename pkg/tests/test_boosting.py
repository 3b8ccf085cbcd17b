import random

import numpy as np
import pytest

from metricboost.boosting import (
    EPSILON,
    BoostedMetric,
    BoostParams,
    aggregate,
    boost,
    boost_dataset,
    power_mean,
    power_mean_grid,
    regularize,
)
from metricboost.explainers import Attribution, ExplainerConfig, explain
from metricboost.metrics import (
    AdditiveMetric,
    CountingMetric,
    MetricRequest,
    TokenF1Metric,
    score_batch,
)

from conftest import make_dataset, make_instance, random_additive_fixture
from oracles import power_mean_brute_force, power_mean_log_domain


class TestRegularize:
    def test_negative_min_shifts(self):
        out = regularize([-0.2, 0.3])
        assert out[0] == pytest.approx(1e-9, abs=1e-24)
        assert out[1] == pytest.approx(0.5 + 1e-9, abs=1e-15)

    def test_nonnegative_only_offsets(self):
        out = regularize([0.1, 0.4])
        assert out.tolist() == [0.1 + 1e-9, 0.4 + 1e-9]

    def test_zero_vector(self):
        assert regularize([0.0]).tolist() == [1e-9]

    def test_output_strictly_positive(self):
        rng = random.Random(13)
        for _ in range(200):
            values = [rng.uniform(-5, 5) for _ in range(rng.randint(1, 12))]
            out = regularize(values)
            assert np.all(out > 0.0)
            assert out.min() >= EPSILON * (1 - 1e-12)

    def test_preserves_ordering(self):
        rng = random.Random(14)
        for _ in range(100):
            values = np.array([rng.uniform(-5, 5) for _ in range(rng.randint(2, 10))])
            out = regularize(values)
            assert np.array_equal(np.argsort(values, kind="stable"), np.argsort(out, kind="stable"))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            regularize([0.1, float("inf")])


class TestPowerMean:
    def test_arithmetic(self):
        assert power_mean([1.0, 7.0], 1.0) == pytest.approx(4.0, abs=1e-12)

    def test_harmonic(self):
        assert power_mean([1.0, 3.0], -1.0) == pytest.approx(1.5, abs=1e-12)

    def test_quadratic(self):
        assert power_mean([1.0, 7.0], 2.0) == pytest.approx(5.0, abs=1e-12)

    def test_geometric(self):
        assert power_mean([2.0, 8.0], 0.0) == pytest.approx(4.0, abs=1e-12)

    def test_matches_plain_formula_on_moderate_inputs(self):
        rng = random.Random(15)
        for _ in range(200):
            values = [rng.uniform(0.1, 10.0) for _ in range(rng.randint(1, 9))]
            p = rng.choice([-3.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0])
            assert power_mean(values, p) == pytest.approx(
                power_mean_brute_force(values, p), rel=1e-12
            )

    def test_matches_log_domain_oracle_at_extreme_exponents(self):
        rng = random.Random(16)
        for _ in range(100):
            values = [rng.uniform(1e-9, 1.0) for _ in range(rng.randint(2, 8))]
            for p in (-30.0, -17.3, 17.3, 29.9, 30.0):
                assert power_mean(values, p) == pytest.approx(
                    power_mean_log_domain(values, p), rel=1e-9
                )

    def test_extreme_p_no_overflow_with_epsilon_values(self):
        values = [1e-9, 0.5, 1.0]
        for p in (-30.0, 30.0):
            out = power_mean(values, p)
            assert np.isfinite(out)
            assert 1e-9 <= out <= 1.0

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            power_mean([], 1.0)
        with pytest.raises(ValueError, match="positive"):
            power_mean([1.0, 0.0], 1.0)
        with pytest.raises(ValueError, match="positive"):
            power_mean([1.0, -2.0], 1.0)
        with pytest.raises(ValueError, match="finite"):
            power_mean([1.0], float("inf"))
        with pytest.raises(ValueError, match="finite"):
            power_mean([float("nan")], 1.0)

    def test_grid_matches_scalar_calls(self):
        rng = random.Random(17)
        exponents = np.concatenate([np.linspace(-30, 30, 41), [0.0]])
        for _ in range(20):
            values = [rng.uniform(1e-9, 2.0) for _ in range(rng.randint(1, 10))]
            grid = power_mean_grid(values, exponents)
            scalar = [power_mean(values, float(p)) for p in exponents]
            assert grid == pytest.approx(scalar, rel=1e-13, abs=0.0)

    def test_grid_input_validation(self):
        with pytest.raises(ValueError):
            power_mean_grid([], [1.0])
        with pytest.raises(ValueError):
            power_mean_grid([0.0], [1.0])
        with pytest.raises(ValueError):
            power_mean_grid([1.0], [float("nan")])


def _attribution(*vectors):
    frozen = []
    for vec in vectors:
        arr = np.asarray(vec, dtype=float)
        arr.flags.writeable = False
        frozen.append(arr)
    return Attribution(per_segment=tuple(frozen), base_score=0.0)


class TestAggregate:
    def test_worked_example(self):
        attribution = _attribution([0.5, 0.4, 0.2, 0.0], [0.5, 0.4, 0.2, 0.0])
        assert aggregate(attribution, 1.0) == pytest.approx(0.275, abs=1e-8)
        assert aggregate(attribution, 1.0) == pytest.approx(0.275 + 1e-9, abs=1e-15)

    def test_all_equal_any_p(self):
        for c in (0.3, 1.0, 4.2):
            for p in (-3.0, -1.0, 0.0, 1.0, 2.5):
                attribution = _attribution([c, c, c])
                assert aggregate(attribution, p) == pytest.approx(c + 1e-9, rel=1e-12)

    def test_negative_value_still_positive_output(self):
        attribution = _attribution([0.5, -0.4], [0.1])
        for p in (-5.0, 0.0, 5.0):
            out = aggregate(attribution, p)
            assert np.isfinite(out) and out > 0.0

    def test_regularize_applied_to_concatenation_once(self):
        # The shift comes from the global minimum across segments, not from
        # per-segment minima.
        attribution = _attribution([-0.5, 0.5], [0.0, 1.0])
        expected = np.array([0.0, 1.0, 0.5, 1.5]) + 1e-9
        assert aggregate(attribution, 1.0) == pytest.approx(expected.mean(), rel=1e-12)

    def test_empty_errors(self):
        with pytest.raises(ValueError, match="no tokens"):
            aggregate(Attribution(per_segment=(), base_score=0.0), 1.0)


class TestBoostParams:
    def test_defaults(self):
        params = BoostParams()
        assert params.p == 1.0 and params.w == 0.5 and params.iterations == 1

    def test_validation(self):
        with pytest.raises(ValueError, match="w must lie"):
            BoostParams(w=1.5)
        with pytest.raises(ValueError, match="w must lie"):
            BoostParams(w=-0.1)
        with pytest.raises(ValueError, match="p must be finite"):
            BoostParams(p=float("inf"))
        with pytest.raises(ValueError, match="iterations"):
            BoostParams(iterations=0)


class TestBoost:
    def test_linear_interpolation_of_known_quantities(self):
        # Additive metric: s0 = 0.9; attribution (0, 0.5, 0.4); with p = 1
        # the aggregate is mean(reg) and s1 must be the w-blend exactly.
        metric = AdditiveMetric({"a": 0.5, "b": 0.4})
        inst = make_instance("b1", ["x"], "a b")
        params = BoostParams(p=1.0, w=0.5, explainer=ExplainerConfig(kind="erasure"))
        scored = boost(metric, inst, params)
        expected_s_hat = np.mean(np.array([0.0, 0.5, 0.4]) + 1e-9)
        assert scored.s0 == pytest.approx(0.9, abs=1e-15)
        assert scored.s_hat == pytest.approx(expected_s_hat, rel=1e-12)
        assert scored.s1 == pytest.approx(0.5 * 0.9 + 0.5 * expected_s_hat, rel=1e-12)
        assert scored.final_score == scored.s1

    def test_w_one_is_bitwise_identity(self):
        dataset, metric, _ = random_additive_fixture(8, seed=31)
        for kind in ("erasure", "lime", "shap"):
            params = BoostParams(
                p=-3.7, w=1.0, explainer=ExplainerConfig(kind=kind, permutations=10, seed=0)
            )
            for inst in dataset:
                scored = boost(metric, inst, params)
                base = score_batch(metric, [MetricRequest.from_instance(inst)])[0]
                assert scored.s1 == base  # bitwise, no arithmetic allowed
                assert scored.s0 == base

    def test_w_zero_returns_aggregate(self):
        metric = AdditiveMetric({"a": 0.5, "b": 0.4})
        inst = make_instance("b2", ["x"], "a b")
        params = BoostParams(p=1.0, w=0.0)
        scored = boost(metric, inst, params)
        assert scored.s1 == scored.s_hat

    def test_deterministic_given_seed(self):
        inst = make_instance("b3", ["a b c d e"], "a c f")
        params = BoostParams(p=2.0, w=0.4, explainer=ExplainerConfig(kind="lime", permutations=30, seed=11))
        one = boost(TokenF1Metric(), inst, params)
        two = boost(TokenF1Metric(), inst, params)
        assert one == two

    def test_history_length_tracks_iterations(self):
        metric = AdditiveMetric({"a": 0.5})
        inst = make_instance("b4", ["x"], "a a")
        params = BoostParams(p=1.0, w=0.5, iterations=3)
        scored = boost(metric, inst, params)
        assert len(scored.history) == 3
        assert scored.history[0] == (scored.s_hat, scored.s1)
        assert scored.final_score == scored.history[-1][1]

    def test_second_iteration_explains_the_composite(self):
        # With a deterministic explainer, two rounds must equal one round
        # applied to the boosted metric handle.
        metric = AdditiveMetric({"a": 0.5, "b": 0.4, "c": 0.1})
        inst = make_instance("b5", ["x y"], "a b c")
        one_round = BoostParams(p=2.0, w=0.6, iterations=1)
        two_rounds = BoostParams(p=2.0, w=0.6, iterations=2)
        direct = boost(metric, inst, two_rounds)
        composed = boost(BoostedMetric(metric, one_round), inst, one_round)
        assert direct.final_score == composed.s1

    def test_boosted_metric_is_pure(self):
        metric = TokenF1Metric()
        boosted = BoostedMetric(metric, BoostParams(p=1.0, w=0.5, explainer=ExplainerConfig(kind="lime", permutations=10, seed=3)))
        request = MetricRequest((("a", "b", "c"),), ("a", "x"))
        first = score_batch(boosted, [request, request])
        second = score_batch(boosted, [request])
        assert first[0] == first[1] == second[0]

    def test_boosted_metric_scores_differ_from_base(self):
        metric = AdditiveMetric({"a": 0.5, "b": 0.4})
        boosted = BoostedMetric(metric, BoostParams(p=1.0, w=0.5))
        request = MetricRequest((("x",),), ("a", "b"))
        [value] = score_batch(boosted, [request])
        assert value != 0.9
        assert 0.0 < value < 0.9


class TestBoostDataset:
    def test_order_and_parallel_determinism(self):
        dataset, metric, _ = random_additive_fixture(12, seed=33)
        params = BoostParams(p=0.0, w=0.2, explainer=ExplainerConfig(kind="lime", permutations=15, seed=1))
        serial = boost_dataset(metric, dataset, params, jobs=1)
        threaded = boost_dataset(metric, dataset, params, jobs=4)
        assert serial == threaded
        assert [s.instance_id for s in serial] == [i.instance_id for i in dataset]

    def test_empty_dataset(self):
        ds = make_dataset([], name="empty")
        assert boost_dataset(TokenF1Metric(), ds, BoostParams()) == []

    def test_counting_evaluations_for_erasure(self):
        # Erasure on a k-token hypothesis with a j-token gt costs
        # 1 + (j + k) evaluations per instance when boosting from scratch.
        counter = CountingMetric(AdditiveMetric({"a": 1.0}))
        inst = make_instance("c1", ["g h"], "a a a")
        boost(counter, inst, BoostParams(p=1.0, w=0.5))
        assert counter.n_requests == 1 + 2 + 3
