"""Acceptance suite: one test per release criterion.

Each test records its verdict in ``RESULTS``; the conftest terminal-summary
hook then prints one ``[acceptance] criterion NN: PASS|FAIL|SKIP`` line per
criterion at the end of the run, so a release run shows the checklist at a
glance:

    python3 -m pytest tests/test_acceptance.py -q

Criterion 11 exercises the separately shipped adapter package and is skipped
when that package is not installed; everything else runs self-contained.
"""

import contextlib
import hashlib
import importlib.util
import random
import sys
import time

import numpy as np
import pytest

from conftest import make_dataset, make_instance
from oracles import (
    CORRELATION_ORACLES,
    pearson_brute_force,
    permute_both_exact,
    power_mean_brute_force,
    shapley_brute_force,
)

from metricboost.boosting import BoostParams, boost_dataset, power_mean, power_mean_grid
from metricboost.bridge import external_metric
from metricboost.calibration import GridSpec, grid_search
from metricboost.corpus import Dataset
from metricboost.evaluation import (
    CorrelationSpec,
    correlation,
    evaluate,
    permute_both_test,
    stability_check,
)
from metricboost.explainers import (
    DEFAULT_REPLACEMENT_TOKEN,
    ExplainerConfig,
    explain,
    lime,
    shap,
)
from metricboost.metrics import (
    AdditiveMetric,
    CallableMetric,
    CountingMetric,
    MetricHandle,
    MetricRequest,
    TokenF1Metric,
    TokenOverlapMetric,
    builtin_metric,
    score_batch,
    score_instances,
)


RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def _criterion(number: int):
    try:
        yield
    except pytest.skip.Exception:
        RESULTS[number] = "SKIP"
        raise
    except BaseException:
        RESULTS[number] = "FAIL"
        raise
    RESULTS[number] = "PASS"


def _single(metric: MetricHandle, gts, hyp) -> float:
    request = MetricRequest(
        ground_truths=tuple(tuple(gt) for gt in gts), hypothesis=tuple(hyp)
    )
    return score_batch(metric, [request])[0]


# ---------------------------------------------------------------------------
# 1: exact SHAP equals brute-force Shapley enumeration


def test_criterion_01_exact_shap_matches_brute_force():
    with _criterion(1):
        rng = random.Random(101)
        vocab = [f"v{i}" for i in range(10)]
        config = ExplainerConfig(kind="shap")
        started = time.perf_counter()
        for trial in range(200):
            d = rng.randint(1, 7)
            hyp_tokens = [rng.choice(vocab) for _ in range(d)]
            gts = [
                rng.sample(vocab, rng.randint(2, 5))
                for _ in range(rng.randint(1, 2))
            ]
            which = trial % 3
            if which == 0:
                metric = TokenF1Metric()
            elif which == 1:
                metric = TokenOverlapMetric()
            else:
                metric = AdditiveMetric({w: rng.uniform(-1.0, 1.0) for w in vocab})

            inst = make_instance(
                f"c1_{trial}", [" ".join(gt) for gt in gts], " ".join(hyp_tokens)
            )
            phi = shap(metric, inst, len(gts), config)

            cache = {}

            def value_fn(coalition):
                key = frozenset(coalition)
                if key not in cache:
                    masked = [
                        tok if i in key else DEFAULT_REPLACEMENT_TOKEN
                        for i, tok in enumerate(hyp_tokens)
                    ]
                    cache[key] = _single(metric, gts, masked)
                return cache[key]

            expected = shapley_brute_force(value_fn, d)
            assert phi == pytest.approx(expected, abs=1e-9)

            full = value_fn(range(d))
            masked_out = value_fn(())
            assert sum(phi) == pytest.approx(full - masked_out, abs=1e-9)
        assert time.perf_counter() - started < 30.0


# ---------------------------------------------------------------------------
# 2: additive-table recovery by every explainer


def test_criterion_02_additive_recovery():
    with _criterion(2):
        rng = random.Random(202)
        # Dyadic table values keep additive sums exact in binary floating
        # point, so erasure recovery can be asserted bitwise.
        vocab = {f"t{i:02d}": (i + 1) / 64.0 for i in range(40)}
        metric = AdditiveMetric(vocab)
        for trial in range(50):
            d = rng.randint(2, 7)
            words = rng.sample(sorted(vocab), d)
            inst = make_instance(f"c2_{trial}", ["ref text"], " ".join(words))
            expected = [vocab[w] for w in words]

            erased = explain(metric, inst, ExplainerConfig(kind="erasure"))
            assert list(erased.per_segment[1]) == expected

            exact = shap(metric, inst, 1, ExplainerConfig(kind="shap"))
            assert exact == pytest.approx(expected, abs=1e-12)

            surrogate = lime(
                metric,
                inst,
                1,
                ExplainerConfig(kind="lime", permutations=500, seed=trial),
            )
            assert surrogate == pytest.approx(expected, abs=0.05)


# ---------------------------------------------------------------------------
# 3: power-mean identities, monotonicity, and bounds


def test_criterion_03_power_mean_suite():
    with _criterion(3):
        rng = random.Random(303)
        for _ in range(300):
            values = [rng.uniform(0.05, 10.0) for _ in range(rng.randint(1, 9))]
            n = len(values)
            arithmetic = sum(values) / n
            harmonic = n / sum(1.0 / v for v in values)
            quadratic = (sum(v * v for v in values) / n) ** 0.5
            geometric = float(np.exp(np.mean(np.log(values))))
            assert power_mean(values, 1.0) == pytest.approx(arithmetic, rel=1e-12)
            assert power_mean(values, -1.0) == pytest.approx(harmonic, rel=1e-12)
            assert power_mean(values, 2.0) == pytest.approx(quadratic, rel=1e-12)
            assert power_mean(values, 0.0) == pytest.approx(geometric, rel=1e-12)
            assert power_mean(values, 3.7) == pytest.approx(
                power_mean_brute_force(values, 3.7), rel=1e-12
            )

        grid = GridSpec().p_values  # the full default [-30, 29.9] exponent grid
        for _ in range(1000):
            values = np.array(
                [10 ** rng.uniform(-3, 3) for _ in range(rng.randint(1, 12))]
            )
            row = power_mean_grid(values, grid)
            scale = np.maximum(np.abs(row[:-1]), 1e-300)
            assert np.all(np.diff(row) >= -1e-9 * scale)  # nondecreasing in p
            low, high = values.min(), values.max()
            assert np.all(row >= low * (1 - 1e-9))
            assert np.all(row <= high * (1 + 1e-9))


# ---------------------------------------------------------------------------
# 4: w = 1 reproduces the original scores bitwise


def test_criterion_04_w_one_identity():
    with _criterion(4):
        rng = random.Random(404)
        vocab = [f"u{i}" for i in range(15)]
        instances = []
        for i in range(10):
            gts = [" ".join(rng.sample(vocab, rng.randint(2, 5)))]
            hyp = " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 6)))
            instances.append(make_instance(f"c4_{i}", gts, hyp))
        dataset = make_dataset(instances, name="w1")

        for metric in (builtin_metric("token_f1"), builtin_metric("overlap")):
            base = score_instances(metric, list(dataset.instances))
            for kind in ("erasure", "lime", "shap"):
                params = BoostParams(
                    p=-3.7,
                    w=1.0,
                    iterations=2,
                    explainer=ExplainerConfig(kind=kind, permutations=8),
                )
                scored = boost_dataset(metric, dataset, params)
                assert [s.s1 for s in scored] == base  # bitwise
                assert [s.s0 for s in scored] == base


# ---------------------------------------------------------------------------
# 5: multi-reference perturbation accounting


def test_criterion_05_multi_reference_accounting():
    with _criterion(5):
        inst = make_instance(
            "c5",
            [f"reference variant number {i}" for i in range(11)],
            "candidate summary with several tokens",
        )
        counter = CountingMetric(builtin_metric("token_f1"))
        explain(
            counter, inst, ExplainerConfig(kind="lime", permutations=100, seed=0)
        )
        # 12 segments (11 references + 1 hypothesis) x 100 samples each.
        assert counter.n_requests - 1 == 1200
        base_requests = counter.n_requests - 12 * 100
        assert base_requests == 1


# ---------------------------------------------------------------------------
# 6: default calibration grid shape


def test_criterion_06_default_grid_shape():
    with _criterion(6):
        grid = GridSpec()
        assert grid.p_values.shape == (600,)
        assert grid.w_values.shape == (6,)
        assert grid.p_values[0] == -30.0
        assert grid.p_values[-1] == 29.9
        assert 0.0 in grid.p_values

        rng = random.Random(606)
        table = {f"z{i}": rng.uniform(0.1, 1.0) for i in range(12)}
        instances = [
            make_instance(
                f"c6_{i}",
                ["src"],
                " ".join(rng.sample(sorted(table), 3)),
                human={"score": rng.random()},
            )
            for i in range(6)
        ]
        result = grid_search(
            AdditiveMetric(table),
            make_dataset(instances, name="grid"),
            ExplainerConfig(kind="erasure"),
        )
        assert result.cells_swept == 3000


# ---------------------------------------------------------------------------
# 7: correlation coefficients against brute-force oracles


def test_criterion_07_correlation_oracles():
    with _criterion(7):
        rng = random.Random(707)
        for coefficient, oracle in CORRELATION_ORACLES.items():
            for _ in range(100):
                n = rng.randint(3, 50)
                if coefficient == "pearson":
                    x = [rng.uniform(-5, 5) for _ in range(n)]
                    y = [rng.uniform(-5, 5) for _ in range(n)]
                else:
                    # Lattice draws produce ties, exercising tie handling.
                    x = [float(rng.randint(0, 8)) for _ in range(n)]
                    y = [float(rng.randint(0, 8)) for _ in range(n)]
                try:
                    expected = oracle(x, y)
                except ZeroDivisionError:
                    continue  # constant draw; undefined either way
                assert correlation(x, y, coefficient) == pytest.approx(
                    expected, abs=1e-12
                )

        for trial in range(4):
            trial_rng = random.Random(7070 + trial)
            a = [trial_rng.uniform(0, 1) for _ in range(8)]
            b = [trial_rng.uniform(0, 1) for _ in range(8)]
            h = [trial_rng.uniform(0, 1) for _ in range(8)]
            for coefficient in ("pearson", "spearman"):
                expected = permute_both_exact(a, b, h, coefficient)
                observed = permute_both_test(a, b, h, coefficient, exact=True)
                assert observed == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# 8: synthetic end-to-end boost (calibrate fold A, evaluate fold B)


def _confounded_corpus():
    """Human score = mean hypothesis-token quality; metric = plain sum of
    token qualities over both segments, confounded by hypothesis length."""
    rng = random.Random(88)
    table = {}
    instances = []
    for i in range(400):
        k = 1 + (i // 2) % 4  # lengths 1..4, balanced across the fold split
        words, qualities = [], []
        for j in range(k):
            word = f"w{i}_{j}"
            quality = rng.uniform(0.05, 1.0)
            table[word] = quality
            words.append(word)
            qualities.append(quality)
        source = f"src{i:03d}"
        table[source] = 0.5
        instances.append(
            make_instance(
                f"i{i:03d}",
                [source],
                " ".join(words),
                human={"score": sum(qualities) / len(qualities)},
            )
        )

    def fn(gts, hyp):
        total = sum(table.get(tok, 0.0) for tok in hyp)
        for gt in gts:
            total += sum(table.get(tok, 0.0) for tok in gt)
        return total

    return instances, CallableMetric(fn, name="confounded_sum")


def test_criterion_08_end_to_end_boost():
    with _criterion(8):
        instances, metric = _confounded_corpus()
        fold_a = Dataset(name="foldA", instances=tuple(instances[0::2]))
        fold_b = Dataset(name="foldB", instances=tuple(instances[1::2]))
        objective = CorrelationSpec("pearson", "segment", "score")

        calibrated = grid_search(
            metric, fold_a, ExplainerConfig(kind="erasure"), objective=objective
        )
        assert not calibrated.fallback_used

        params = BoostParams(
            p=calibrated.p,
            w=calibrated.w,
            iterations=1,
            explainer=ExplainerConfig(kind="erasure"),
        )
        report = evaluate(metric, fold_b, params, [objective], resamples=999, seed=0)
        row = report.rows[0]
        assert row.delta >= 0.05
        assert row.p_value <= 0.05

        # Oracle cross-check: recompute both correlations from scratch.
        scored = boost_dataset(metric, fold_b, params)
        human = [inst.human_scores["score"] for inst in fold_b.instances]
        baseline = pearson_brute_force([s.s0 for s in scored], human)
        boosted = pearson_brute_force([s.s1 for s in scored], human)
        assert row.baseline == pytest.approx(baseline, abs=1e-12)
        assert row.boosted == pytest.approx(boosted, abs=1e-12)
        assert row.delta == pytest.approx(boosted - baseline, abs=1e-12)


# ---------------------------------------------------------------------------
# 9: seed stability of sampled explanations


def test_criterion_09_seed_stability():
    with _criterion(9):
        rng = random.Random(99)
        vocab = [f"t{j}" for j in range(30)]
        instances = []
        for i in range(50):
            n_gt = rng.randint(5, 9)
            gt_words = rng.sample(vocab, n_gt)
            n_hyp = rng.randint(6, 10)
            keep = rng.randint(2, min(n_gt, n_hyp))
            hyp_words = gt_words[:keep] + rng.sample(vocab, n_hyp - keep)
            rng.shuffle(hyp_words)
            instances.append(
                make_instance(
                    f"s{i}",
                    [" ".join(gt_words)],
                    " ".join(hyp_words),
                    human={"score": keep / n_hyp},
                )
            )
        dataset = make_dataset(instances, name="stability")
        metric = builtin_metric("token_f1")

        correlations = {}
        for samples in (100, 1000):
            params = BoostParams(
                p=1.0,
                w=0.5,
                iterations=1,
                explainer=ExplainerConfig(kind="lime", permutations=samples),
            )
            correlations[samples] = stability_check(
                metric, dataset, params, seeds=[0, 1]
            )
        assert correlations[100] >= 0.99
        assert correlations[1000] >= correlations[100]


# ---------------------------------------------------------------------------
# 10: erasure throughput with plan-batched scoring


class _ChunkRecorder(MetricHandle):
    def __init__(self, inner: MetricHandle):
        super().__init__()
        self.inner = inner
        self.name = inner.name
        self.kind = inner.kind
        self.batch_capacity = inner.batch_capacity
        self.single_flight = inner.single_flight
        self.sizes = []

    def _score_chunk(self, requests):
        self.sizes.append(len(requests))
        return self.inner._score_chunk(requests)


def test_criterion_10_erasure_throughput():
    with _criterion(10):
        rng = random.Random(1010)
        vocab = [f"perf{i}" for i in range(60)]
        instances = [
            make_instance(
                f"p{i}",
                [" ".join(rng.sample(vocab, 3))],
                " ".join(rng.choice(vocab) for _ in range(20)),
            )
            for i in range(100)
        ]
        recorder = _ChunkRecorder(builtin_metric("token_f1"))
        config = ExplainerConfig(kind="erasure")

        started = time.perf_counter()
        for inst in instances:
            explain(recorder, inst, config)
        elapsed = time.perf_counter() - started

        assert elapsed < 10.0
        # Per instance: one base evaluation, then every perturbation of every
        # segment in a single batch (3 reference + 20 hypothesis deletions).
        assert recorder.sizes == [1, 23] * 100


# ---------------------------------------------------------------------------
# 11: bridge conformance against the adapter's mock scorer


def _mock_score(gts, hyp) -> float:
    payload = "\x1e".join(" ".join(seg) for seg in (*gts, hyp))
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def test_criterion_11_bridge_conformance():
    with _criterion(11):
        if importlib.util.find_spec("bridge_adapter") is None:
            pytest.skip("adapter package not installed")
        endpoint = f"cmd:{sys.executable} -m bridge_adapter --scorer mock"

        rng = random.Random(1111)
        vocab = [f"b{i}" for i in range(25)]
        requests = []
        for _ in range(1000):
            gts = tuple(
                tuple(rng.choice(vocab) for _ in range(rng.randint(1, 4)))
                for _ in range(rng.randint(1, 2))
            )
            hyp = tuple(rng.choice(vocab) for _ in range(rng.randint(1, 5)))
            requests.append(MetricRequest(ground_truths=gts, hypothesis=hyp))

        runs = []
        for _ in range(2):
            with external_metric(endpoint) as metric:
                runs.append(score_batch(metric, requests))
        assert runs[0] == runs[1]  # deterministic across connections
        expected = [_mock_score(r.ground_truths, r.hypothesis) for r in requests]
        assert runs[0] == expected  # matches the published hash formula

        # A scorer failure surfaces as a metric error and leaves the
        # connection usable for the next request.
        flaky = f"cmd:{sys.executable} -m bridge_adapter --scorer mock --fail-on FAILME"
        with external_metric(flaky) as metric:
            bad = MetricRequest(ground_truths=(("x",),), hypothesis=("FAILME",))
            with pytest.raises(Exception) as excinfo:
                score_batch(metric, [bad])
            from metricboost.metrics import MetricError

            assert isinstance(excinfo.value, MetricError)
            good = requests[:5]
            assert score_batch(metric, good) == expected[:5]

        # Boosting over the bridge equals boosting over an in-process metric
        # implementing the same mock function, bitwise.
        dataset = make_dataset(
            [
                make_instance(
                    f"c11_{i}",
                    [" ".join(rng.sample(vocab, 3))],
                    " ".join(rng.choice(vocab) for _ in range(rng.randint(2, 5))),
                )
                for i in range(6)
            ],
            name="bridge",
        )
        params = BoostParams(
            p=-2.0, w=0.3, iterations=1, explainer=ExplainerConfig(kind="erasure")
        )
        local = CallableMetric(_mock_score, name="mock")
        with external_metric(endpoint) as remote:
            over_bridge = boost_dataset(remote, dataset, params)
        in_process = boost_dataset(local, dataset, params)
        assert [s.s1 for s in over_bridge] == [s.s1 for s in in_process]
        assert [s.s0 for s in over_bridge] == [s.s0 for s in in_process]
