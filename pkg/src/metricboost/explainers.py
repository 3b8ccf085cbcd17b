"""Model-agnostic token attributions for black-box metrics.

Three explainers share one interface: given a metric, an instance, and a
target segment, produce one importance value per token of that segment.
Whole-instance explanations run the segment explainer once per segment
(all ground truths, then the hypothesis), holding every other segment fixed,
and concatenate nothing -- the per-segment vectors are kept separate so
downstream aggregation can decide how to combine them.

* erasure: importance of a token is the score drop when that token is
  deleted outright.
* lime: fit a weighted ridge surrogate over sampled binary masks; masked
  tokens are replaced by a neutral replacement token, and mask rows closer
  to the unperturbed input get larger fitting weights.
* shap: Shapley values of the tokens, computed by exact coalition
  enumeration for short segments and by antithetic permutation sampling
  otherwise. Masked-out tokens are replaced, as in lime.

All randomness is derived from (config seed, instance identity, segment
index), so results are reproducible and independent of scheduling.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from sklearn.linear_model import Ridge

from .corpus import EvalInstance
from .metrics import MetricHandle, MetricRequest, score_batch

__all__ = [
    "ExplainerError",
    "ExplainerConfig",
    "Attribution",
    "explain",
    "erasure",
    "lime",
    "shap",
    "EXPLAINER_KINDS",
    "DEFAULT_REPLACEMENT_TOKEN",
]

EXPLAINER_KINDS = ("erasure", "lime", "shap")
DEFAULT_REPLACEMENT_TOKEN = "UNKWORDZ"

# Surrogate constants for lime: proximity kernel width and ridge strength.
_KERNEL_WIDTH = 25.0
_RIDGE_ALPHA = 1.0

_DEFAULT_PERMUTATIONS = {"lime": 100, "shap": 10}


class ExplainerError(Exception):
    """Raised when an explanation cannot be produced."""


@dataclass(frozen=True)
class ExplainerConfig:
    """Settings shared by all explainers.

    ``permutations`` is the per-segment sample count: number of mask rows for
    lime, number of token permutations for sampled shap (each permutation is
    walked forward and reversed). ``None`` picks the kind's default. Segments
    no longer than ``exact_shap_max_tokens`` use exact Shapley enumeration.
    """

    kind: str = "erasure"
    permutations: int | None = None
    replacement_token: str = DEFAULT_REPLACEMENT_TOKEN
    seed: int = 0
    exact_shap_max_tokens: int = 7

    def __post_init__(self) -> None:
        if self.kind not in EXPLAINER_KINDS:
            raise ExplainerError(f"unknown explainer kind {self.kind!r}; expected one of {EXPLAINER_KINDS}")
        if self.permutations is not None and self.permutations < 1:
            raise ExplainerError(f"permutations must be >= 1, got {self.permutations}")
        if not self.replacement_token or any(ch.isspace() for ch in self.replacement_token):
            raise ExplainerError("replacement_token must be a nonempty whitespace-free token")
        if self.exact_shap_max_tokens < 0:
            raise ExplainerError("exact_shap_max_tokens must be >= 0")

    @property
    def resolved_permutations(self) -> int:
        if self.permutations is not None:
            return self.permutations
        return _DEFAULT_PERMUTATIONS.get(self.kind, 0)


@dataclass(frozen=True, eq=False)
class Attribution:
    """Per-token importances for one instance under one metric.

    ``per_segment`` holds one read-only vector per segment, ordered as all
    ground truths followed by the hypothesis. ``base_score`` is the metric's
    score of the unperturbed instance.
    """

    per_segment: tuple[np.ndarray, ...]
    base_score: float

    @property
    def token_count(self) -> int:
        return sum(len(v) for v in self.per_segment)

    def concatenated(self) -> np.ndarray:
        if not self.per_segment:
            return np.zeros(0)
        return np.concatenate([np.asarray(v, dtype=float) for v in self.per_segment])


def _frozen(vector: np.ndarray) -> np.ndarray:
    out = np.asarray(vector, dtype=float)
    out.flags.writeable = False
    return out


def _content_key(request: MetricRequest) -> str:
    digest = hashlib.sha256()
    for gt in request.ground_truths:
        for token in gt:
            digest.update(token.encode("utf-8"))
            digest.update(b"\x1f")
        digest.update(b"\x1e")
    digest.update(b"\x1d")
    for token in request.hypothesis:
        digest.update(token.encode("utf-8"))
        digest.update(b"\x1f")
    return digest.hexdigest()


def _make_rng(seed: int, seed_key: str, segment_index: int) -> np.random.Generator:
    material = hashlib.sha256(f"{seed_key}\x1f{segment_index}".encode("utf-8")).digest()
    entropy = int.from_bytes(material[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([seed % (2**63), entropy, segment_index]))


def _segment_tokens(request: MetricRequest, segment_index: int) -> tuple[str, ...]:
    n_gts = len(request.ground_truths)
    if 0 <= segment_index < n_gts:
        return request.ground_truths[segment_index]
    if segment_index == n_gts:
        return request.hypothesis
    raise ExplainerError(f"segment index {segment_index} out of range for {n_gts + 1} segments")


def _with_segment(request: MetricRequest, segment_index: int, tokens: tuple[str, ...]) -> MetricRequest:
    n_gts = len(request.ground_truths)
    if segment_index == n_gts:
        return MetricRequest(ground_truths=request.ground_truths, hypothesis=tokens)
    gts = list(request.ground_truths)
    gts[segment_index] = tokens
    return MetricRequest(ground_truths=tuple(gts), hypothesis=request.hypothesis)


def _masked_tokens(tokens: Sequence[str], active: Sequence[bool], replacement: str) -> tuple[str, ...]:
    return tuple(tok if keep else replacement for tok, keep in zip(tokens, active))


# Each segment explanation is planned in two phases so that a whole
# instance's perturbations can travel in a single score_batch call: the plan
# lists the perturbed requests up front, and `finish` turns their scores into
# the segment's attribution vector.


@dataclass
class _SegmentPlan:
    requests: list[MetricRequest]
    finish: "callable[[Sequence[float]], np.ndarray]"


def _erasure_plan(request: MetricRequest, segment_index: int, base_score: float) -> _SegmentPlan:
    tokens = _segment_tokens(request, segment_index)
    perturbed = [
        _with_segment(request, segment_index, tokens[:i] + tokens[i + 1 :])
        for i in range(len(tokens))
    ]

    def finish(scores: Sequence[float]) -> np.ndarray:
        return base_score - np.asarray(scores, dtype=float)

    return _SegmentPlan(perturbed, finish)


def _lime_plan(
    request: MetricRequest,
    segment_index: int,
    config: ExplainerConfig,
    base_score: float,
    rng: np.random.Generator,
) -> _SegmentPlan:
    tokens = _segment_tokens(request, segment_index)
    width = len(tokens)
    n_samples = config.resolved_permutations
    # Row 0 is the unperturbed instance; each sampled row masks a uniformly
    # drawn number k in 1..width of distinct positions. Duplicate rows are
    # kept: they simply repeat an observation in the surrogate fit.
    masks = np.ones((n_samples + 1, width), dtype=float)
    for row in range(1, n_samples + 1):
        k = int(rng.integers(1, width + 1))
        positions = rng.choice(width, size=k, replace=False)
        masks[row, positions] = 0.0
    perturbed = [
        _with_segment(
            request,
            segment_index,
            _masked_tokens(tokens, masks[row] > 0.0, config.replacement_token),
        )
        for row in range(1, n_samples + 1)
    ]

    def finish(scores: Sequence[float]) -> np.ndarray:
        targets = np.empty(n_samples + 1)
        targets[0] = base_score
        targets[1:] = scores
        # Proximity to the unperturbed row: cosine between a binary mask and
        # the all-ones mask is sqrt(active fraction).
        distance = 1.0 - np.sqrt(masks.mean(axis=1))
        weights = np.exp(-(distance**2) / _KERNEL_WIDTH**2)
        surrogate = Ridge(alpha=_RIDGE_ALPHA)
        surrogate.fit(masks, targets, sample_weight=weights)
        return np.asarray(surrogate.coef_, dtype=float)

    return _SegmentPlan(perturbed, finish)


def _coalition_request(
    request: MetricRequest,
    segment_index: int,
    tokens: tuple[str, ...],
    coalition: int,
    replacement: str,
) -> MetricRequest:
    active = [bool((coalition >> i) & 1) for i in range(len(tokens))]
    return _with_segment(request, segment_index, _masked_tokens(tokens, active, replacement))


def _shap_exact_plan(
    request: MetricRequest,
    segment_index: int,
    config: ExplainerConfig,
    base_score: float,
) -> _SegmentPlan:
    tokens = _segment_tokens(request, segment_index)
    width = len(tokens)
    full = (1 << width) - 1
    pending = list(range(full))  # every coalition except the full one
    perturbed = [
        _coalition_request(request, segment_index, tokens, c, config.replacement_token)
        for c in pending
    ]

    def finish(scores: Sequence[float]) -> np.ndarray:
        value = np.empty(full + 1)
        value[pending] = scores
        value[full] = base_score
        # Classic Shapley weights by coalition size.
        size_weight = [
            math.factorial(s) * math.factorial(width - 1 - s) / math.factorial(width)
            for s in range(width)
        ]
        phi = np.zeros(width)
        for coalition in range(full + 1):
            size = coalition.bit_count()
            for i in range(width):
                bit = 1 << i
                if coalition & bit:
                    continue
                phi[i] += size_weight[size] * (value[coalition | bit] - value[coalition])
        return phi

    return _SegmentPlan(perturbed, finish)


def _shap_sampled_plan(
    request: MetricRequest,
    segment_index: int,
    config: ExplainerConfig,
    base_score: float,
    rng: np.random.Generator,
) -> _SegmentPlan:
    tokens = _segment_tokens(request, segment_index)
    width = len(tokens)
    n_perms = config.resolved_permutations
    perms = [rng.permutation(width) for _ in range(n_perms)]
    full = (1 << width) - 1
    # Gather every prefix coalition needed by the forward and reversed walks,
    # deduplicated in first-seen order; the full coalition reuses base_score.
    needed: dict[int, None] = {0: None}
    for perm in perms:
        for order in (perm, perm[::-1]):
            coalition = 0
            for token_index in order:
                coalition |= 1 << int(token_index)
                needed.setdefault(coalition, None)
    to_score = [c for c in needed if c != full]
    perturbed = [
        _coalition_request(request, segment_index, tokens, c, config.replacement_token)
        for c in to_score
    ]

    def finish(scores: Sequence[float]) -> np.ndarray:
        value = dict(zip(to_score, scores))
        value[full] = base_score
        phi = np.zeros(width)
        for perm in perms:
            for order in (perm, perm[::-1]):
                coalition = 0
                previous = value[0]
                for token_index in order:
                    coalition |= 1 << int(token_index)
                    current = value[coalition]
                    phi[int(token_index)] += current - previous
                    previous = current
        return phi / (2.0 * n_perms)

    return _SegmentPlan(perturbed, finish)


def _plan_segment(
    request: MetricRequest,
    segment_index: int,
    config: ExplainerConfig,
    seed_key: str,
    base_score: float,
) -> _SegmentPlan:
    tokens = _segment_tokens(request, segment_index)
    if not tokens:
        return _SegmentPlan([], lambda scores: np.zeros(0))
    if config.kind == "erasure":
        return _erasure_plan(request, segment_index, base_score)
    if config.kind == "lime":
        rng = _make_rng(config.seed, seed_key, segment_index)
        return _lime_plan(request, segment_index, config, base_score, rng)
    if len(tokens) <= config.exact_shap_max_tokens:
        return _shap_exact_plan(request, segment_index, config, base_score)
    rng = _make_rng(config.seed, seed_key, segment_index)
    return _shap_sampled_plan(request, segment_index, config, base_score, rng)


def _explain_request(
    metric: MetricHandle,
    request: MetricRequest,
    config: ExplainerConfig,
    seed_key: str | None = None,
    base_score: float | None = None,
) -> Attribution:
    if seed_key is None:
        seed_key = _content_key(request)
    if base_score is None:
        base_score = score_batch(metric, [request])[0]
    n_segments = len(request.ground_truths) + 1
    plans = [
        _plan_segment(request, segment_index, config, seed_key, base_score)
        for segment_index in range(n_segments)
    ]
    # One batch per instance; score_batch chunks it to the handle's capacity.
    combined = [req for plan in plans for req in plan.requests]
    scores = score_batch(metric, combined) if combined else []
    vectors = []
    offset = 0
    for segment_index, plan in enumerate(plans):
        vector = plan.finish(scores[offset : offset + len(plan.requests)])
        offset += len(plan.requests)
        if not np.all(np.isfinite(vector)):
            raise ExplainerError(
                f"non-finite attribution for segment {segment_index} under metric {metric.name!r}"
            )
        vectors.append(_frozen(vector))
    return Attribution(per_segment=tuple(vectors), base_score=float(base_score))


def explain(
    metric: MetricHandle,
    instance: EvalInstance,
    config: ExplainerConfig,
    base_score: float | None = None,
) -> Attribution:
    """Explain ``metric`` on ``instance``: one importance vector per segment.

    The base score is computed once (or taken from ``base_score`` when the
    caller already knows it) and shared across all segment explanations.
    """
    request = MetricRequest.from_instance(instance)
    return _explain_request(
        metric, request, config, seed_key=instance.instance_id, base_score=base_score
    )


def _single_segment(
    metric: MetricHandle,
    instance: EvalInstance,
    segment_index: int,
    kind: str,
    config: ExplainerConfig | None,
    base_score: float | None,
) -> np.ndarray:
    config = replace(config, kind=kind) if config is not None else ExplainerConfig(kind=kind)
    request = MetricRequest.from_instance(instance)
    tokens = _segment_tokens(request, segment_index)
    if not tokens:
        raise ExplainerError(f"segment {segment_index} has no tokens")
    if base_score is None:
        base_score = score_batch(metric, [request])[0]
    plan = _plan_segment(request, segment_index, config, instance.instance_id, base_score)
    scores = score_batch(metric, plan.requests) if plan.requests else []
    vector = plan.finish(scores)
    if not np.all(np.isfinite(vector)):
        raise ExplainerError(f"non-finite attribution for segment {segment_index}")
    return _frozen(vector)


def erasure(
    metric: MetricHandle,
    instance: EvalInstance,
    segment_index: int,
    base_score: float | None = None,
) -> np.ndarray:
    """Deletion-based importances for one segment (ground truths first, then
    the hypothesis). Costs one metric evaluation per token, plus one for the
    base score when it is not supplied."""
    return _single_segment(metric, instance, segment_index, "erasure", None, base_score)


def lime(
    metric: MetricHandle,
    instance: EvalInstance,
    segment_index: int,
    config: ExplainerConfig | None = None,
    base_score: float | None = None,
) -> np.ndarray:
    """Ridge-surrogate importances for one segment."""
    return _single_segment(metric, instance, segment_index, "lime", config, base_score)


def shap(
    metric: MetricHandle,
    instance: EvalInstance,
    segment_index: int,
    config: ExplainerConfig | None = None,
    base_score: float | None = None,
) -> np.ndarray:
    """Shapley-value importances for one segment (exact when short enough)."""
    return _single_segment(metric, instance, segment_index, "shap", config, base_score)
