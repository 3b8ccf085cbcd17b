"""Shared builders for the test suite."""

from __future__ import annotations

import random

import pytest

from metricboost.corpus import Dataset, EvalInstance, Segment
from metricboost.metrics import AdditiveMetric


def make_instance(
    instance_id: str,
    gts: list[str],
    hyp: str,
    human: dict[str, float] | None = None,
    system: str = "sys1",
    lp: str = "",
) -> EvalInstance:
    return EvalInstance(
        instance_id=instance_id,
        system=system,
        language_pair=lp,
        ground_truths=tuple(Segment.from_text(g) for g in gts),
        hypothesis=Segment.from_text(hyp),
        human_scores=dict(human or {}),
    )


def make_dataset(instances, name: str = "test") -> Dataset:
    return Dataset(name=name, instances=tuple(instances))


@pytest.fixture
def tiny_dataset() -> Dataset:
    return make_dataset(
        [
            make_instance("i0", ["the cat sat"], "the cat sat", {"score": 1.0}),
            make_instance("i1", ["the cat sat"], "a dog ran", {"score": 0.0}),
            make_instance("i2", ["green ideas sleep"], "green ideas", {"score": 0.7}),
        ]
    )


def random_word_table(
    rng: random.Random, size: int, low: float = 0.05, high: float = 1.0
) -> dict[str, float]:
    return {f"w{i:03d}": round(rng.uniform(low, high), 6) for i in range(size)}


def random_additive_fixture(
    n_instances: int,
    seed: int,
    min_tokens: int = 2,
    max_tokens: int = 7,
    vocab_size: int = 40,
    low: float = 0.05,
    high: float = 1.0,
    gt_tokens: int = 1,
):
    """Instances whose hypothesis tokens carry known per-token values.

    Returns ``(dataset, metric, table)``; the metric scores a hypothesis as
    the sum of its tokens' table values, so every explainer has a known
    ground-truth attribution to recover.
    """
    rng = random.Random(seed)
    table = random_word_table(rng, vocab_size, low, high)
    words = sorted(table)
    instances = []
    for i in range(n_instances):
        n_tok = rng.randint(min_tokens, max_tokens)
        hyp_words = [rng.choice(words) for _ in range(n_tok)]
        gt_words = [rng.choice(words) for _ in range(gt_tokens)]
        human = sum(table[w] for w in hyp_words) / n_tok
        instances.append(
            make_instance(
                f"inst{i:04d}",
                [" ".join(gt_words) + f" src{i:04d}"],
                " ".join(hyp_words),
                {"score": human},
            )
        )
    return make_dataset(instances, name="additive"), AdditiveMetric(table), table


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print one verdict line per acceptance criterion after the run."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.ensure_newline()
    for number in sorted(RESULTS):
        terminalreporter.write_line(
            f"[acceptance] criterion {number:02d}: {RESULTS[number]}"
        )
