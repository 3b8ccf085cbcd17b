"""Turning attributions back into scores.

An attribution vector is summarized by a power mean (after shifting into
strictly positive territory) and linearly recombined with the original
metric score. The recombined scorer can itself be treated as a metric and
explained again, which is what ``iterations > 1`` does.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Dataset, EvalInstance
from .explainers import Attribution, ExplainerConfig, _explain_request, explain
from .metrics import MetricHandle, MetricRequest, score_batch

__all__ = [
    "EPSILON",
    "BoostParams",
    "ScoredInstance",
    "BoostedMetric",
    "regularize",
    "power_mean",
    "power_mean_grid",
    "aggregate",
    "boost",
    "boost_dataset",
]

# Offset that keeps regularized attribution values strictly positive.
EPSILON = 1e-9


def regularize(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Map arbitrary finite values onto strictly positive ones.

    If any value is negative, all values are shifted up by the magnitude of
    the minimum; afterwards a constant ``EPSILON`` offset is added so the
    smallest value is exactly ``EPSILON`` rather than zero.
    """
    v = np.asarray(values, dtype=float)
    if v.size and not np.all(np.isfinite(v)):
        raise ValueError("regularize requires finite values")
    minimum = v.min() if v.size else 0.0
    if minimum < 0.0:
        v = v - minimum
    return v + EPSILON


def power_mean(values: Sequence[float] | np.ndarray, p: float) -> float:
    """Generalized mean with exponent ``p`` of strictly positive values.

    ``p = 0`` is the geometric mean. Large |p| stays numerically stable
    because the dominant element is factored out before exponentiation.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("power mean of an empty vector is undefined")
    if not np.all(np.isfinite(v)):
        raise ValueError("power mean requires finite values")
    if np.any(v <= 0.0):
        raise ValueError("power mean requires strictly positive values")
    if not math.isfinite(p):
        raise ValueError("exponent p must be finite")
    if p == 0.0:
        return float(np.exp(np.mean(np.log(v))))
    scale = float(v.max() if p > 0 else v.min())
    return float(scale * np.mean((v / scale) ** p) ** (1.0 / p))


def power_mean_grid(values: Sequence[float] | np.ndarray, exponents: Sequence[float] | np.ndarray) -> np.ndarray:
    """Vectorized :func:`power_mean` of one vector over many exponents."""
    v = np.asarray(values, dtype=float)
    ps = np.asarray(exponents, dtype=float)
    if v.size == 0:
        raise ValueError("power mean of an empty vector is undefined")
    if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
        raise ValueError("power mean requires finite, strictly positive values")
    if ps.size and not np.all(np.isfinite(ps)):
        raise ValueError("exponents must be finite")
    out = np.empty(ps.shape, dtype=float)
    zero = ps == 0.0
    if zero.any():
        out[zero] = float(np.exp(np.mean(np.log(v))))
    nonzero = ~zero
    if nonzero.any():
        p_nz = ps[nonzero]
        scale = np.where(p_nz > 0.0, v.max(), v.min())
        ratios = v[None, :] / scale[:, None]
        means = (ratios ** p_nz[:, None]).mean(axis=1)
        out[nonzero] = scale * means ** (1.0 / p_nz)
    return out


def aggregate(attribution: Attribution, p: float) -> float:
    """Collapse an instance's attribution into one score: regularize the
    concatenated per-token values, then take the power mean."""
    concatenated = attribution.concatenated()
    if concatenated.size == 0:
        raise ValueError("cannot aggregate an attribution with no tokens")
    return power_mean(regularize(concatenated), p)


@dataclass(frozen=True)
class BoostParams:
    """Recombination settings.

    ``w`` weights the original score against the attribution summary
    (``w = 1`` keeps the original score untouched); ``p`` is the power-mean
    exponent; ``iterations`` repeats the whole procedure with the boosted
    scorer standing in for the original metric.
    """

    p: float = 1.0
    w: float = 0.5
    iterations: int = 1
    explainer: ExplainerConfig = field(default_factory=ExplainerConfig)

    def __post_init__(self) -> None:
        if not math.isfinite(self.p):
            raise ValueError(f"p must be finite, got {self.p!r}")
        if not (0.0 <= self.w <= 1.0):
            raise ValueError(f"w must lie in [0, 1], got {self.w!r}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass(frozen=True)
class ScoredInstance:
    """Boosting outcome for one instance.

    ``s0`` is the original metric score, ``s_hat`` the aggregated
    attribution, and ``s1`` their recombination after the first round.
    ``history`` records ``(s_hat, s)`` for every round; the last entry's
    score is what downstream evaluation uses.
    """

    instance_id: str
    s0: float
    s_hat: float
    s1: float
    history: tuple[tuple[float, float], ...]

    @property
    def final_score(self) -> float:
        return self.history[-1][1]


def _combine(w: float, original: float, aggregated: float) -> float:
    # w == 1 must reproduce the original bitwise, so skip the arithmetic.
    if w == 1.0:
        return original
    return w * original + (1.0 - w) * aggregated


class BoostedMetric(MetricHandle):
    """A boosted scorer exposed as a metric handle.

    Scoring a request runs the inner metric, explains it, aggregates, and
    recombines -- so explaining this handle explains the boosted score end
    to end. Sampling seeds derive from request content, keeping the handle
    pure.
    """

    def __init__(self, inner: MetricHandle, params: BoostParams):
        super().__init__()
        self.inner = inner
        self.params = params
        self.name = f"boosted({inner.name})"
        self.kind = inner.kind

    def _score_chunk(self, requests: Sequence[MetricRequest]) -> list[float]:
        out = []
        for request in requests:
            original = score_batch(self.inner, [request])[0]
            attribution = _explain_request(
                self.inner, request, self.params.explainer, base_score=original
            )
            aggregated = aggregate(attribution, self.params.p)
            out.append(_combine(self.params.w, original, aggregated))
        return out


def boost(metric: MetricHandle, instance: EvalInstance, params: BoostParams) -> ScoredInstance:
    """Boost ``metric`` on one instance.

    Each round explains the current scorer on the instance, aggregates the
    attribution with exponent ``p``, and blends it into the current score
    with weight ``w``. Later rounds treat the blended scorer as the metric
    being explained, including inside perturbation scoring.
    """
    request = MetricRequest.from_instance(instance)
    current: MetricHandle = metric
    score = score_batch(metric, [request])[0]
    s0 = score
    history: list[tuple[float, float]] = []
    for _ in range(params.iterations):
        attribution = explain(current, instance, params.explainer, base_score=score)
        aggregated = aggregate(attribution, params.p)
        score = _combine(params.w, score, aggregated)
        history.append((aggregated, score))
        current = BoostedMetric(current, params)
    return ScoredInstance(
        instance_id=instance.instance_id,
        s0=s0,
        s_hat=history[0][0],
        s1=history[0][1],
        history=tuple(history),
    )


def boost_dataset(
    metric: MetricHandle,
    dataset: Dataset,
    params: BoostParams,
    jobs: int = 1,
) -> list[ScoredInstance]:
    """Boost every instance of ``dataset``, preserving order.

    ``jobs > 1`` fans instances out over a thread pool; per-instance seeding
    makes the result independent of scheduling.
    """
    instances = dataset.instances
    if jobs <= 1 or len(instances) <= 1:
        return [boost(metric, inst, params) for inst in instances]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda inst: boost(metric, inst, params), instances))
