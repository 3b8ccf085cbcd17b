"""Metric handles and batch scoring.

A metric is anything that maps (ground truths, hypothesis) token lists to a
real score. Metrics are addressed through :class:`MetricHandle` so the rest
of the pipeline never cares whether scoring happens in-process or behind an
external endpoint. Handles must be pure: the same request always yields the
same score within a run.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .corpus import EvalInstance

__all__ = [
    "MetricError",
    "MetricRequest",
    "MetricHandle",
    "TokenF1Metric",
    "TokenOverlapMetric",
    "AdditiveMetric",
    "CallableMetric",
    "CountingMetric",
    "CachingMetric",
    "score_batch",
    "score_instances",
    "builtin_token_f1",
    "builtin_additive",
    "builtin_metric",
    "BUILTIN_METRICS",
]


class MetricError(Exception):
    """Raised when a metric cannot produce a valid score.

    ``chunk_index`` identifies which chunk of a batched call failed, when the
    failure happened during chunked scoring.
    """

    def __init__(self, message: str, chunk_index: int | None = None):
        super().__init__(message)
        self.chunk_index = chunk_index


@dataclass(frozen=True)
class MetricRequest:
    """One scoring request: tokenized ground truths plus a tokenized
    hypothesis. The hypothesis may be empty only for perturbed inputs
    produced by explainers; loaded corpus data never is."""

    ground_truths: tuple[tuple[str, ...], ...]
    hypothesis: tuple[str, ...]

    @classmethod
    def from_instance(cls, instance: EvalInstance) -> "MetricRequest":
        return cls(
            ground_truths=tuple(seg.tokens for seg in instance.ground_truths),
            hypothesis=instance.hypothesis.tokens,
        )


class MetricHandle:
    """Base class for scorers.

    Subclasses implement :meth:`_score_chunk` for at most ``batch_capacity``
    requests at a time; use :func:`score_batch` to score arbitrary batches.
    """

    name: str = "metric"
    kind: str = "builtin"  # "builtin" or "external"
    batch_capacity: int = 1024
    single_flight: bool = False

    def __init__(self) -> None:
        self._lock = threading.Lock()

    def _score_chunk(self, requests: Sequence[MetricRequest]) -> list[float]:
        raise NotImplementedError

    def close(self) -> None:  # pragma: no cover - trivial default
        """Release any resources (external handles override this)."""

    def __enter__(self) -> "MetricHandle":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def score_batch(metric: MetricHandle, batch: Sequence[MetricRequest]) -> list[float]:
    """Score ``batch`` with ``metric``, preserving request order.

    Requests are fed to the handle in chunks of ``metric.batch_capacity``.
    Any failure (including a non-finite score) raises :class:`MetricError`
    carrying the index of the offending chunk. Handles marked
    ``single_flight`` are serialized under a lock so concurrent callers
    cannot interleave chunks.
    """
    if len(batch) == 0:
        raise MetricError("empty batch")
    capacity = max(1, int(metric.batch_capacity))
    lock = metric._lock if metric.single_flight else None
    if lock is not None:
        lock.acquire()
    try:
        scores: list[float] = []
        for chunk_index in range(0, len(batch), capacity):
            chunk = batch[chunk_index : chunk_index + capacity]
            index = chunk_index // capacity
            try:
                out = metric._score_chunk(chunk)
            except MetricError as exc:
                if exc.chunk_index is None:
                    exc.chunk_index = index
                raise
            except Exception as exc:
                raise MetricError(f"{metric.name}: {exc}", chunk_index=index) from exc
            if len(out) != len(chunk):
                raise MetricError(
                    f"{metric.name}: returned {len(out)} scores for {len(chunk)} requests",
                    chunk_index=index,
                )
            for value in out:
                value = float(value)
                if not math.isfinite(value):
                    raise MetricError(f"{metric.name}: non-finite score {value!r}", chunk_index=index)
                scores.append(value)
        return scores
    finally:
        if lock is not None:
            lock.release()


def score_instances(metric: MetricHandle, instances: Sequence[EvalInstance]) -> list[float]:
    """Convenience wrapper: score whole instances in order."""
    if len(instances) == 0:
        return []
    return score_batch(metric, [MetricRequest.from_instance(i) for i in instances])


class TokenF1Metric(MetricHandle):
    """Harmonic mean of token precision and best-reference token recall.

    Precision is the fraction of hypothesis token positions whose token
    occurs in any ground truth; recall is the best per-reference fraction of
    reference positions covered by the hypothesis token set.
    """

    name = "token_f1"

    def _score_chunk(self, requests: Sequence[MetricRequest]) -> list[float]:
        return [self._one(r) for r in requests]

    @staticmethod
    def _one(request: MetricRequest) -> float:
        hyp = request.hypothesis
        if not hyp:
            return 0.0
        gt_union = set()
        for gt in request.ground_truths:
            gt_union.update(gt)
        precision = sum(1 for tok in hyp if tok in gt_union) / len(hyp)
        hyp_set = set(hyp)
        recall = 0.0
        for gt in request.ground_truths:
            if not gt:
                continue
            recall = max(recall, sum(1 for tok in gt if tok in hyp_set) / len(gt))
        if precision + recall == 0.0:
            return 0.0
        return 2.0 * precision * recall / (precision + recall)


class TokenOverlapMetric(MetricHandle):
    """Token precision with a brevity penalty against the longest reference."""

    name = "overlap"

    def _score_chunk(self, requests: Sequence[MetricRequest]) -> list[float]:
        return [self._one(r) for r in requests]

    @staticmethod
    def _one(request: MetricRequest) -> float:
        hyp = request.hypothesis
        if not hyp:
            return 0.0
        gt_union = set()
        longest = 0
        for gt in request.ground_truths:
            gt_union.update(gt)
            longest = max(longest, len(gt))
        precision = sum(1 for tok in hyp if tok in gt_union) / len(hyp)
        if longest == 0:
            return 0.0
        return precision * min(1.0, len(hyp) / longest)


class AdditiveMetric(MetricHandle):
    """Sum of per-token weights over hypothesis positions.

    Tokens absent from the table contribute ``default`` (0 unless set).
    Exactly additive by construction, which makes it a convenient ground
    truth for attribution methods.
    """

    name = "additive"

    def __init__(self, table: Mapping[str, float], default: float = 0.0):
        super().__init__()
        self.table = dict(table)
        self.default = float(default)

    def _score_chunk(self, requests: Sequence[MetricRequest]) -> list[float]:
        return [
            sum(self.table.get(tok, self.default) for tok in r.hypothesis)
            for r in requests
        ]


class CallableMetric(MetricHandle):
    """Adapt a plain function ``(ground_truths, hypothesis) -> float``."""

    def __init__(
        self,
        fn: Callable[[tuple[tuple[str, ...], ...], tuple[str, ...]], float],
        name: str = "callable",
        batch_capacity: int = 1024,
    ):
        super().__init__()
        self._fn = fn
        self.name = name
        self.batch_capacity = batch_capacity

    def _score_chunk(self, requests: Sequence[MetricRequest]) -> list[float]:
        return [float(self._fn(r.ground_truths, r.hypothesis)) for r in requests]


class CountingMetric(MetricHandle):
    """Delegating wrapper that records every request it forwards.

    Used by tests and instrumentation to assert how many metric evaluations a
    pipeline stage performs.
    """

    def __init__(self, inner: MetricHandle):
        super().__init__()
        self.inner = inner
        self.name = inner.name
        self.kind = inner.kind
        self.batch_capacity = inner.batch_capacity
        self.single_flight = inner.single_flight
        self.requests: list[MetricRequest] = []

    @property
    def n_requests(self) -> int:
        return len(self.requests)

    def reset(self) -> None:
        self.requests.clear()

    def _score_chunk(self, requests: Sequence[MetricRequest]) -> list[float]:
        self.requests.extend(requests)
        return self.inner._score_chunk(requests)


class CachingMetric(MetricHandle):
    """Delegating wrapper that memoizes scores by request within one run.

    Only sound because handles are required to be pure. The cache never
    persists across processes.
    """

    def __init__(self, inner: MetricHandle):
        super().__init__()
        self.inner = inner
        self.name = inner.name
        self.kind = inner.kind
        self.batch_capacity = inner.batch_capacity
        self.single_flight = inner.single_flight
        self._cache: dict[MetricRequest, float] = {}

    def _score_chunk(self, requests: Sequence[MetricRequest]) -> list[float]:
        missing = [r for r in requests if r not in self._cache]
        if missing:
            # Deduplicate while preserving order; dict keys keep insertion order.
            unique = list(dict.fromkeys(missing))
            fresh = score_batch(self.inner, unique)
            self._cache.update(zip(unique, fresh))
        return [self._cache[r] for r in requests]


def builtin_token_f1(gts: Sequence[Sequence[str]], hyp: Sequence[str]) -> float:
    """Functional form of :class:`TokenF1Metric` for direct use."""
    return TokenF1Metric._one(
        MetricRequest(tuple(tuple(gt) for gt in gts), tuple(hyp))
    )


def builtin_additive(
    gts: Sequence[Sequence[str]], hyp: Sequence[str], table: Mapping[str, float]
) -> float:
    """Sum of ``table`` values over hypothesis tokens (missing tokens count 0)."""
    return float(sum(table.get(tok, 0.0) for tok in hyp))


BUILTIN_METRICS: dict[str, Callable[[], MetricHandle]] = {
    "token_f1": TokenF1Metric,
    "overlap": TokenOverlapMetric,
}


def builtin_metric(name: str) -> MetricHandle:
    """Instantiate a builtin metric by name."""
    try:
        factory = BUILTIN_METRICS[name]
    except KeyError:
        raise MetricError(
            f"unknown builtin metric {name!r}; available: {sorted(BUILTIN_METRICS)}"
        ) from None
    return factory()
