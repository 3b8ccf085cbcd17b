"""Meta-evaluation against human judgements.

Correlation coefficients (Pearson, Spearman, Kendall tau-b) at segment or
system level, a paired permutation test for the difference between two
scorers' correlations, Bonferroni correction, and report assembly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .boosting import BoostParams, boost_dataset
from .corpus import Dataset, DatasetError, EvalInstance
from .explainers import ExplainerConfig
from .metrics import MetricHandle

__all__ = [
    "UndefinedCorrelationError",
    "CorrelationSpec",
    "ReportRow",
    "EvalReport",
    "pearson",
    "spearman",
    "kendall",
    "correlation",
    "system_scores",
    "permute_both_test",
    "bonferroni",
    "evaluate",
    "stability_check",
    "COEFFICIENTS",
]

COEFFICIENTS = ("pearson", "spearman", "kendall")
LEVELS = ("segment", "system")


class UndefinedCorrelationError(Exception):
    """Raised when a correlation has no defined value (e.g. constant input)."""


def _pair(x: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    xv = np.asarray(x, dtype=float)
    yv = np.asarray(y, dtype=float)
    if xv.ndim != 1 or yv.ndim != 1:
        raise ValueError("correlation inputs must be one-dimensional")
    if len(xv) != len(yv):
        raise ValueError(f"length mismatch: {len(xv)} vs {len(yv)}")
    if len(xv) < 2:
        raise UndefinedCorrelationError("correlation needs at least two points")
    if not (np.all(np.isfinite(xv)) and np.all(np.isfinite(yv))):
        raise ValueError("correlation inputs must be finite")
    return xv, yv


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation; constant input is undefined."""
    xv, yv = _pair(x, y)
    dx = xv - xv.mean()
    dy = yv - yv.mean()
    den_x = float(dx @ dx)
    den_y = float(dy @ dy)
    if den_x == 0.0 or den_y == 0.0:
        raise UndefinedCorrelationError("constant vector has no Pearson correlation")
    # One combined square root keeps perfectly (anti)correlated inputs at
    # exactly +/-1: for dy == +/-dx the ratio is n / sqrt(n * n) = 1.
    r = float(dx @ dy) / math.sqrt(den_x * den_y)
    return min(1.0, max(-1.0, r))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    xv, yv = _pair(x, y)
    return pearson(stats.rankdata(xv, method="average"), stats.rankdata(yv, method="average"))


def kendall(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall tau-b (tie-corrected); undefined when all pairs are tied."""
    xv, yv = _pair(x, y)
    tau = stats.kendalltau(xv, yv, variant="b").statistic
    if not math.isfinite(tau):
        raise UndefinedCorrelationError("degenerate ties leave Kendall tau-b undefined")
    return min(1.0, max(-1.0, float(tau)))


_COEFFICIENT_FNS: dict[str, Callable[[Sequence[float], Sequence[float]], float]] = {
    "pearson": pearson,
    "spearman": spearman,
    "kendall": kendall,
}


def correlation(x: Sequence[float], y: Sequence[float], coefficient: str) -> float:
    try:
        fn = _COEFFICIENT_FNS[coefficient]
    except KeyError:
        raise ValueError(f"unknown coefficient {coefficient!r}; expected one of {COEFFICIENTS}") from None
    return fn(x, y)


@dataclass(frozen=True)
class CorrelationSpec:
    """What to correlate: which coefficient, at which level, on which human aspect."""

    coefficient: str = "pearson"
    level: str = "segment"
    aspect: str = "score"

    def __post_init__(self) -> None:
        if self.coefficient not in COEFFICIENTS:
            raise ValueError(f"unknown coefficient {self.coefficient!r}; expected one of {COEFFICIENTS}")
        if self.level not in LEVELS:
            raise ValueError(f"unknown level {self.level!r}; expected one of {LEVELS}")


def system_scores(
    dataset: Dataset | Sequence[EvalInstance],
    scores: Sequence[float],
    aspect: str | None = None,
) -> tuple[list[str], np.ndarray, np.ndarray | None]:
    """Per-system arithmetic means of instance scores (and of one human aspect).

    Systems are returned in first-appearance order. When ``aspect`` is given,
    every instance must carry it; the third return value is then the per-
    system mean human score (otherwise ``None``).
    """
    instances = dataset.instances if isinstance(dataset, Dataset) else tuple(dataset)
    if len(instances) != len(scores):
        raise ValueError(f"{len(scores)} scores for {len(instances)} instances")
    order: list[str] = []
    metric_sums: dict[str, float] = {}
    human_sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for inst, value in zip(instances, scores):
        system = inst.system
        if system not in counts:
            order.append(system)
            counts[system] = 0
            metric_sums[system] = 0.0
            human_sums[system] = 0.0
        counts[system] += 1
        metric_sums[system] += float(value)
        if aspect is not None:
            if aspect not in inst.human_scores:
                raise DatasetError(f"instance {inst.instance_id!r} has no human aspect {aspect!r}")
            human_sums[system] += inst.human_scores[aspect]
    metric_means = np.array([metric_sums[s] / counts[s] for s in order])
    human_means = (
        np.array([human_sums[s] / counts[s] for s in order]) if aspect is not None else None
    )
    return order, metric_means, human_means


def permute_both_test(
    scores_a: Sequence[float],
    scores_b: Sequence[float],
    human: Sequence[float],
    coefficient: str = "pearson",
    resamples: int = 1000,
    seed: int = 0,
    exact: bool = False,
    max_retries: int = 1000,
) -> float:
    """One-sided paired permutation test that scorer B beats scorer A.

    The observed statistic is delta = corr(b, human) - corr(a, human). Each
    resample independently swaps the a/b assignment per item with probability
    one half and recomputes delta*; the p-value is
    ``(#{delta* >= delta} + 1) / (resamples + 1)``. Items are whatever the
    caller aligned the vectors on (segments or per-system aggregates).

    ``exact=True`` enumerates all 2^n swap patterns instead and returns the
    exact tail fraction ``#{delta* >= delta} / 2^n``. Resamples whose
    correlation is undefined are redrawn, up to ``max_retries`` extra draws.
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    h = np.asarray(human, dtype=float)
    if not (len(a) == len(b) == len(h)):
        raise ValueError("scores_a, scores_b and human must have equal length")
    delta = correlation(b, h, coefficient) - correlation(a, h, coefficient)
    n = len(h)
    if exact:
        hits = 0
        for bits in range(1 << n):
            mask = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
            a_star = np.where(mask, b, a)
            b_star = np.where(mask, a, b)
            d = correlation(b_star, h, coefficient) - correlation(a_star, h, coefficient)
            if d >= delta:
                hits += 1
        return hits / float(1 << n)
    if resamples < 1:
        raise ValueError(f"resamples must be >= 1, got {resamples}")
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    retries = 0
    while done < resamples:
        mask = rng.random(n) < 0.5
        a_star = np.where(mask, b, a)
        b_star = np.where(mask, a, b)
        try:
            d = correlation(b_star, h, coefficient) - correlation(a_star, h, coefficient)
        except UndefinedCorrelationError:
            retries += 1
            if retries > max_retries:
                raise UndefinedCorrelationError(
                    f"gave up after {max_retries} undefined-correlation resamples"
                ) from None
            continue
        if d >= delta:
            hits += 1
        done += 1
    return (hits + 1) / (resamples + 1)


def bonferroni(
    p_values: Sequence[float | None],
    family_size: int | None = None,
    alpha: float = 0.05,
) -> list[bool]:
    """Significance flags at level ``alpha / family_size``.

    ``None`` entries (undefined tests) are never significant and do not count
    toward the default family size. ``family_size`` may be given explicitly
    but must cover at least the number of defined tests.
    """
    defined = [p for p in p_values if p is not None]
    family = family_size if family_size is not None else len(defined)
    if family < len(defined):
        raise ValueError(f"family_size {family} smaller than number of tests {len(defined)}")
    if family == 0:
        return [False for _ in p_values]
    threshold = alpha / family
    return [p is not None and p <= threshold for p in p_values]


@dataclass(frozen=True)
class ReportRow:
    """One evaluated cell: a group of instances under one correlation spec.

    ``group`` is the language pair when present, otherwise the aspect name.
    Undefined correlations are carried as ``None``, never as 0.
    """

    group: str
    aspect: str
    coefficient: str
    level: str
    n_items: int
    baseline: float | None
    boosted: float | None
    delta: float | None
    p_value: float | None
    significant: bool = False
    significant_bonferroni: bool = False


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[ReportRow, ...]
    alpha: float
    family_size: int
    n_significant: int
    n_significant_bonferroni: int

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "family_size": self.family_size,
            "n_significant": self.n_significant,
            "n_significant_bonferroni": self.n_significant_bonferroni,
            "rows": [
                {
                    "group": r.group,
                    "aspect": r.aspect,
                    "coefficient": r.coefficient,
                    "level": r.level,
                    "n_items": r.n_items,
                    "baseline": r.baseline,
                    "boosted": r.boosted,
                    "delta": r.delta,
                    "p_value": r.p_value,
                    "significant": r.significant,
                    "significant_bonferroni": r.significant_bonferroni,
                }
                for r in self.rows
            ],
        }

    def to_text_table(self) -> str:
        """Plain-text table: original vs boosted correlation per row.

        ``*`` marks p <= alpha, ``**`` marks significance surviving the
        Bonferroni correction; '-' stands for an undefined cell.
        """

        def fmt(value: float | None, signed: bool = False) -> str:
            if value is None:
                return "-"
            return f"{value:+.4f}" if signed else f"{value:.4f}"

        header = ("group", "aspect", "coeff", "level", "n", "ORIG", "BOOST", "delta", "p", "sig")
        body = []
        for r in self.rows:
            sig = "**" if r.significant_bonferroni else ("*" if r.significant else "")
            body.append(
                (
                    r.group,
                    r.aspect,
                    r.coefficient,
                    r.level,
                    str(r.n_items),
                    fmt(r.baseline),
                    fmt(r.boosted),
                    fmt(r.delta, signed=True),
                    fmt(r.p_value),
                    sig,
                )
            )
        widths = [max(len(header[i]), *(len(row[i]) for row in body)) if body else len(header[i]) for i in range(len(header))]
        lines = [
            "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)).rstrip(),
        ]
        for row in body:
            lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        lines.append(
            f"significant: {self.n_significant}/{self.family_size}  "
            f"after Bonferroni: {self.n_significant_bonferroni}/{self.family_size}  "
            f"(alpha={self.alpha:g}; * raw, ** Bonferroni)"
        )
        return "\n".join(lines)


def _groups_for(
    dataset: Dataset, spec: CorrelationSpec
) -> list[tuple[str, list[EvalInstance], list[int]]]:
    """Instances carrying the requested aspect, grouped by language pair.

    The group label is the language pair, or the aspect name for corpora
    without language pairs (e.g. summarization).
    """
    grouped: dict[str, tuple[list[EvalInstance], list[int]]] = {}
    for index, inst in enumerate(dataset.instances):
        if spec.aspect not in inst.human_scores:
            continue
        label = inst.language_pair or spec.aspect
        grouped.setdefault(label, ([], []))
        grouped[label][0].append(inst)
        grouped[label][1].append(index)
    if not grouped:
        raise DatasetError(f"dataset {dataset.name!r} has no human scores for aspect {spec.aspect!r}")
    return [(label, pair[0], pair[1]) for label, pair in grouped.items()]


def _level_vectors(
    instances: list[EvalInstance],
    values: np.ndarray,
    spec: CorrelationSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate (metric values, human values) to the requested level."""
    if spec.level == "system":
        _, metric_means, human_means = system_scores(instances, values, spec.aspect)
        return metric_means, human_means
    human = np.array([inst.human_scores[spec.aspect] for inst in instances])
    return np.asarray(values, dtype=float), human


def _row_seed(seed: int, spec: CorrelationSpec, group: str) -> int:
    material = f"{seed}\x1f{spec.coefficient}\x1f{spec.level}\x1f{spec.aspect}\x1f{group}"
    return int.from_bytes(hashlib.sha256(material.encode("utf-8")).digest()[:8], "big")


def evaluate(
    metric: MetricHandle,
    dataset: Dataset,
    params: BoostParams,
    specs: Sequence[CorrelationSpec],
    resamples: int = 1000,
    seed: int = 0,
    jobs: int = 1,
    alpha: float = 0.05,
    family_size: int | None = None,
) -> EvalReport:
    """Boost the whole dataset once, then report baseline vs boosted
    correlation per (group, spec) with permute-both p-values and Bonferroni
    flags. Undefined correlations become null cells; their rows carry no
    p-value and never count as significant."""
    if not specs:
        raise ValueError("at least one CorrelationSpec is required")
    scored = boost_dataset(metric, dataset, params, jobs=jobs)
    s0 = np.array([s.s0 for s in scored])
    s1 = np.array([s.final_score for s in scored])
    raw_rows = []
    for spec in specs:
        for label, instances, indices in _groups_for(dataset, spec):
            idx = np.asarray(indices)
            base_vec, human_vec = _level_vectors(instances, s0[idx], spec)
            boost_vec, _ = _level_vectors(instances, s1[idx], spec)
            try:
                baseline = correlation(base_vec, human_vec, spec.coefficient)
            except UndefinedCorrelationError:
                baseline = None
            try:
                boosted = correlation(boost_vec, human_vec, spec.coefficient)
            except UndefinedCorrelationError:
                boosted = None
            p_value = None
            if baseline is not None and boosted is not None:
                p_value = permute_both_test(
                    base_vec,
                    boost_vec,
                    human_vec,
                    coefficient=spec.coefficient,
                    resamples=resamples,
                    seed=_row_seed(seed, spec, label),
                )
            delta = boosted - baseline if baseline is not None and boosted is not None else None
            raw_rows.append(
                ReportRow(
                    group=label,
                    aspect=spec.aspect,
                    coefficient=spec.coefficient,
                    level=spec.level,
                    n_items=len(base_vec),
                    baseline=baseline,
                    boosted=boosted,
                    delta=delta,
                    p_value=p_value,
                )
            )
    p_values = [r.p_value for r in raw_rows]
    defined = [p for p in p_values if p is not None]
    family = family_size if family_size is not None else len(defined)
    corrected = bonferroni(p_values, family_size=family, alpha=alpha) if family else [False] * len(p_values)
    rows = tuple(
        replace(
            row,
            significant=row.p_value is not None and row.p_value <= alpha,
            significant_bonferroni=flag,
        )
        for row, flag in zip(raw_rows, corrected)
    )
    return EvalReport(
        rows=rows,
        alpha=alpha,
        family_size=family,
        n_significant=sum(1 for r in rows if r.significant),
        n_significant_bonferroni=sum(1 for r in rows if r.significant_bonferroni),
    )


def stability_check(
    metric: MetricHandle,
    dataset: Dataset,
    params: BoostParams,
    explainer: ExplainerConfig | None = None,
    repeats: int = 2,
    seeds: Sequence[int] | None = None,
    jobs: int = 1,
) -> float:
    """Mean pairwise Pearson correlation of boosted scores across re-runs
    with different explainer seeds. Deterministic explainers give exactly 1."""
    if seeds is None:
        if repeats < 2:
            raise ValueError(f"repeats must be >= 2, got {repeats}")
        seeds = list(range(repeats))
    else:
        seeds = list(seeds)
        if len(seeds) < 2:
            raise ValueError("need at least two seeds")
    template = explainer if explainer is not None else params.explainer
    runs = []
    for s in seeds:
        run_params = replace(params, explainer=replace(template, seed=s))
        scored = boost_dataset(metric, dataset, run_params, jobs=jobs)
        runs.append(np.array([x.final_score for x in scored]))
    total = 0.0
    pairs = 0
    for i in range(len(runs)):
        for j in range(i + 1, len(runs)):
            if np.array_equal(runs[i], runs[j]):
                # Identical runs correlate perfectly even if degenerate.
                total += 1.0
            else:
                total += pearson(runs[i], runs[j])
            pairs += 1
    return total / pairs
