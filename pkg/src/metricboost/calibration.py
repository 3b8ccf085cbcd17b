"""Grid-search calibration of the recombination parameters (p, w).

Attributions and original scores are computed once per instance; every grid
cell then reuses them, since aggregation and linear recombination are cheap.
A cell "improves" when its correlation with human scores beats the
keep-the-original baseline (w = 1) for at least one group; the selected
parameters are the medians of the improving p values and of the improving w
values, taken independently.
"""

from __future__ import annotations

import datetime as _dt
import json
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .boosting import power_mean_grid, regularize
from .corpus import Dataset, DatasetError, EvalInstance
from .evaluation import (
    CorrelationSpec,
    UndefinedCorrelationError,
    correlation,
    system_scores,
)
from .explainers import ExplainerConfig, explain
from .metrics import MetricHandle, score_instances

__all__ = [
    "GridSpec",
    "CalibrationResult",
    "grid_search",
    "merge_calibrations",
    "write_profile",
    "read_profile",
]

FALLBACK_P = 1.0
FALLBACK_W = 1.0


def _default_p_values() -> np.ndarray:
    # 600 values in exact 0.1 steps over [-30.0, 29.9]; contains 0 exactly.
    return (np.arange(600) - 300) / 10.0


def _default_w_values() -> np.ndarray:
    return np.linspace(0.0, 1.0, 6)


@dataclass(frozen=True)
class GridSpec:
    """The (p, w) search grid; defaults to 600 x 6 cells."""

    p_values: np.ndarray = field(default_factory=_default_p_values)
    w_values: np.ndarray = field(default_factory=_default_w_values)

    def __post_init__(self) -> None:
        p = np.asarray(self.p_values, dtype=float)
        w = np.asarray(self.w_values, dtype=float)
        if p.size == 0 or w.size == 0:
            raise ValueError("grid axes must be nonempty")
        if np.any(np.diff(p) <= 0) or np.any(np.diff(w) <= 0):
            raise ValueError("grid axes must be sorted strictly ascending")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(w))):
            raise ValueError("grid values must be finite")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("w values must lie in [0, 1]")
        object.__setattr__(self, "p_values", p)
        object.__setattr__(self, "w_values", w)


@dataclass(frozen=True)
class CalibrationResult:
    """Outcome of one grid search.

    ``improving`` holds one ``(p, w, delta)`` triple per (cell, group) whose
    correlation beat that group's baseline; ``baselines`` maps
    ``(group, aspect, coefficient, level)`` to the w=1 correlation (``None``
    when undefined). ``cells_swept`` counts distinct non-baseline grid cells.
    """

    p: float
    w: float
    improving: tuple[tuple[float, float, float], ...]
    baselines: dict[tuple[str, str, str, str], float | None]
    fallback_used: bool
    cells_swept: int
    objectives: tuple[CorrelationSpec, ...]
    explainer: ExplainerConfig
    metric_name: str


def _pearson_columns(matrix: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pearson correlation of every column of ``matrix`` against ``y``;
    zero-variance columns yield NaN."""
    centered = matrix - matrix.mean(axis=0)
    dy = y - y.mean()
    denom = np.sqrt((centered * centered).sum(axis=0) * float(dy @ dy))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (centered.T @ dy) / denom
    return np.clip(r, -1.0, 1.0)


def _column_correlations(matrix: np.ndarray, y: np.ndarray, coefficient: str) -> np.ndarray:
    """Correlation of each column with ``y``; undefined columns become NaN."""
    if len(y) < 2:
        return np.full(matrix.shape[1], np.nan)
    if coefficient == "pearson":
        return _pearson_columns(matrix, y)
    if coefficient == "spearman":
        ranks = stats.rankdata(matrix, method="average", axis=0)
        return _pearson_columns(ranks, stats.rankdata(y, method="average"))
    out = np.empty(matrix.shape[1])
    for j in range(matrix.shape[1]):
        try:
            out[j] = correlation(matrix[:, j], y, coefficient)
        except UndefinedCorrelationError:
            out[j] = np.nan
    return out


def _group_vectors(
    dataset: Dataset,
    spec: CorrelationSpec,
    s0: np.ndarray,
    shat: np.ndarray,
) -> list[tuple[str, np.ndarray, np.ndarray, np.ndarray]]:
    """Per group: (label, level-aggregated s0, level-aggregated shat matrix,
    human vector). Aggregation to system level is linear, so aggregating s0
    and the per-exponent shat columns commutes with recombination."""
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
    out = []
    for label, (instances, indices) in grouped.items():
        idx = np.asarray(indices)
        if spec.level == "system":
            systems, base, human = system_scores(instances, s0[idx], spec.aspect)
            sub = shat[idx]
            agg = np.empty((len(systems), shat.shape[1]))
            position = {s: i for i, s in enumerate(systems)}
            counts = np.zeros(len(systems))
            agg[:] = 0.0
            for row, inst in zip(sub, instances):
                i = position[inst.system]
                agg[i] += row
                counts[i] += 1
            agg /= counts[:, None]
            out.append((label, base, agg, human))
        else:
            human = np.array([inst.human_scores[spec.aspect] for inst in instances])
            out.append((label, s0[idx], shat[idx], human))
    return out


def grid_search(
    metric: MetricHandle,
    dataset: Dataset,
    explainer: ExplainerConfig,
    grid: GridSpec | None = None,
    objective: CorrelationSpec | Sequence[CorrelationSpec] = CorrelationSpec(),
    jobs: int = 1,
) -> CalibrationResult:
    """Sweep the (p, w) grid on ``dataset`` and pick parameters.

    The metric is consulted exactly as often as one score+explain pass per
    instance; the sweep itself never touches it. Cells with w = 1 are the
    baseline and are excluded from the sweep. If no cell improves any group,
    the fallback (p=1, w=1) is returned with ``fallback_used=True``.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot calibrate on an empty dataset")
    grid = grid if grid is not None else GridSpec()
    objectives = (
        (objective,) if isinstance(objective, CorrelationSpec) else tuple(objective)
    )
    if not objectives:
        raise ValueError("at least one objective CorrelationSpec is required")

    instances = dataset.instances
    s0 = np.asarray(score_instances(metric, list(instances)), dtype=float)

    def _explain_one(pair: tuple[int, EvalInstance]) -> np.ndarray:
        index, inst = pair
        attribution = explain(metric, inst, explainer, base_score=float(s0[index]))
        return regularize(attribution.concatenated())

    if jobs > 1 and len(instances) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            regs = list(pool.map(_explain_one, enumerate(instances)))
    else:
        regs = [_explain_one(pair) for pair in enumerate(instances)]
    # One power-mean row per instance over the whole exponent grid.
    shat = np.stack([power_mean_grid(r, grid.p_values) for r in regs])

    baselines: dict[tuple[str, str, str, str], float | None] = {}
    improving: list[tuple[float, float, float]] = []
    cells_swept = int(len(grid.p_values) * np.sum(grid.w_values != 1.0))
    for spec in objectives:
        for label, base_vec, shat_matrix, human in _group_vectors(dataset, spec, s0, shat):
            key = (label, spec.aspect, spec.coefficient, spec.level)
            try:
                baseline = correlation(base_vec, human, spec.coefficient)
            except UndefinedCorrelationError:
                baseline = None
            baselines[key] = baseline
            if baseline is None:
                continue  # nothing to improve against
            for w in grid.w_values:
                if w == 1.0:
                    continue
                blended = w * base_vec[:, None] + (1.0 - w) * shat_matrix
                cell_corr = _column_correlations(blended, human, spec.coefficient)
                better = np.flatnonzero(np.nan_to_num(cell_corr, nan=-np.inf) > baseline)
                for j in better:
                    improving.append(
                        (float(grid.p_values[j]), float(w), float(cell_corr[j] - baseline))
                    )
    if improving:
        selected_p = float(statistics.median(cell[0] for cell in improving))
        selected_w = float(statistics.median(cell[1] for cell in improving))
        fallback_used = False
    else:
        selected_p, selected_w = FALLBACK_P, FALLBACK_W
        fallback_used = True
    return CalibrationResult(
        p=selected_p,
        w=selected_w,
        improving=tuple(improving),
        baselines=baselines,
        fallback_used=fallback_used,
        cells_swept=cells_swept,
        objectives=objectives,
        explainer=explainer,
        metric_name=metric.name,
    )


def merge_calibrations(results: Sequence[CalibrationResult]) -> tuple[float, float]:
    """Average the selected parameters of several calibrations (e.g. folds)."""
    if not results:
        raise ValueError("no calibration results to merge")
    return (
        float(np.mean([r.p for r in results])),
        float(np.mean([r.w for r in results])),
    )


def _created_timestamp() -> str:
    """UTC creation stamp; honors SOURCE_DATE_EPOCH for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        moment = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        moment = _dt.datetime.now(tz=_dt.timezone.utc)
    return moment.replace(microsecond=0).isoformat()


def _explainer_dict(config: ExplainerConfig) -> dict:
    return {
        "kind": config.kind,
        "permutations": config.permutations,
        "replacement_token": config.replacement_token,
        "seed": config.seed,
        "exact_shap_max_tokens": config.exact_shap_max_tokens,
    }


def profile_dict(
    p: float,
    w: float,
    explainer: ExplainerConfig,
    metric_name: str,
    objectives: Sequence[CorrelationSpec],
) -> dict:
    return {
        "p": p,
        "w": w,
        "explainer": _explainer_dict(explainer),
        "metric": metric_name,
        "objective": [
            {"coefficient": s.coefficient, "level": s.level, "aspect": s.aspect}
            for s in objectives
        ],
        "created": _created_timestamp(),
    }


def write_profile(path: str | Path, result: CalibrationResult) -> None:
    """Persist selected parameters as a reusable JSON profile."""
    payload = profile_dict(
        result.p, result.w, result.explainer, result.metric_name, result.objectives
    )
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def read_profile(path: str | Path) -> dict:
    """Load a profile written by :func:`write_profile`.

    Returns a dict with keys ``p``, ``w``, ``explainer`` (an
    :class:`ExplainerConfig` or ``None``), ``metric``, ``objective`` (list of
    :class:`CorrelationSpec`), and ``created``.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read profile {path}: {exc}") from exc
    if not isinstance(raw, dict) or "p" not in raw or "w" not in raw:
        raise DatasetError(f"profile {path} must be a JSON object with 'p' and 'w'")
    explainer = None
    if isinstance(raw.get("explainer"), dict):
        e = raw["explainer"]
        explainer = ExplainerConfig(
            kind=e.get("kind", "erasure"),
            permutations=e.get("permutations"),
            replacement_token=e.get("replacement_token", "UNKWORDZ"),
            seed=int(e.get("seed", 0)),
            exact_shap_max_tokens=int(e.get("exact_shap_max_tokens", 7)),
        )
    objectives = [
        CorrelationSpec(
            coefficient=o.get("coefficient", "pearson"),
            level=o.get("level", "segment"),
            aspect=o.get("aspect", "score"),
        )
        for o in raw.get("objective", [])
        if isinstance(o, dict)
    ]
    return {
        "p": float(raw["p"]),
        "w": float(raw["w"]),
        "explainer": explainer,
        "metric": raw.get("metric"),
        "objective": objectives,
        "created": raw.get("created"),
    }
