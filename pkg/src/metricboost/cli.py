"""Command-line interface.

Subcommands map one-to-one onto the library: score, explain, boost,
calibrate, evaluate, stability, split. Commands communicate through files
only; all randomness is controlled by --seed, so identical invocations
produce byte-identical outputs. Progress goes to stderr, data to --out or
stdout.

Exit codes: 0 success, 1 usage error, 2 data error, 3 metric/bridge error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .boosting import BoostParams, boost_dataset
from .bridge import external_metric
from .calibration import GridSpec, grid_search, profile_dict, read_profile
from .corpus import Dataset, DatasetError, load_dataset, make_splits
from .evaluation import (
    CorrelationSpec,
    UndefinedCorrelationError,
    evaluate,
    stability_check,
)
from .explainers import (
    DEFAULT_REPLACEMENT_TOKEN,
    EXPLAINER_KINDS,
    ExplainerConfig,
    ExplainerError,
    explain,
)
from .metrics import BUILTIN_METRICS, MetricError, MetricHandle, builtin_metric, score_instances

__all__ = ["main", "RunConfig"]


class UsageError(Exception):
    """Raised for invalid flag combinations."""


class _Parser(argparse.ArgumentParser):
    # The contract reserves exit code 2 for data errors; usage errors exit 1.
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Resolved settings for one command invocation (flags + profile merged)."""

    command: str
    dataset: Path
    format: str | None
    metric: str | None
    endpoint: str | None
    explainer: ExplainerConfig
    p: float | None
    w: float | None
    iterations: int
    profile: Path | None
    folds: int
    seed: int
    jobs: int
    out: Path | None
    aspects: list[str] = field(default_factory=list)
    coefficient: str = "pearson"
    level: str = "segment"
    resamples: int = 1000
    repeats: int = 2
    details: Path | None = None


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", required=True, type=Path, help="input dataset file")
    parser.add_argument("--format", choices=["jsonl", "tsv"], help="dataset format (default: by suffix)")
    parser.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    parser.add_argument("--jobs", type=int, default=1, help="instance-level parallelism")
    parser.add_argument("--out", type=Path, help="output file (default: stdout)")


def _add_metric(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--metric",
        choices=sorted(BUILTIN_METRICS),
        default=None,
        help="builtin metric name (default token_f1)",
    )
    parser.add_argument(
        "--endpoint",
        default=None,
        help="external metric endpoint (cmd:<command> or tcp:<host>:<port>)",
    )


def _add_explainer(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--explainer", choices=list(EXPLAINER_KINDS), default=None)
    parser.add_argument("--samples", type=int, default=None, help="per-segment sample/permutation budget")
    parser.add_argument("--replacement-token", default=None, help=f"mask token (default {DEFAULT_REPLACEMENT_TOKEN})")
    parser.add_argument("--exact-shap-max-tokens", type=int, default=None, help="exact-enumeration cutoff (default 7)")


def _add_params(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--p", type=float, default=None, help="power-mean exponent")
    parser.add_argument("--w", type=float, default=None, help="weight of the original score in [0, 1]")
    parser.add_argument("--iterations", type=int, default=1, help="boosting rounds (default 1)")
    parser.add_argument("--profile", type=Path, default=None, help="calibration profile JSON to read p/w from")


def _add_objective(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--aspect", action="append", default=None, help="human aspect (repeatable)")
    parser.add_argument("--coefficient", choices=["pearson", "spearman", "kendall"], default="pearson")
    parser.add_argument("--level", choices=["segment", "system"], default="segment")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metricboost", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command", parser_class=_Parser)

    p_score = sub.add_parser("score", help="score every instance with the base metric")
    _add_common(p_score)
    _add_metric(p_score)

    p_explain = sub.add_parser("explain", help="write per-token attributions")
    _add_common(p_explain)
    _add_metric(p_explain)
    _add_explainer(p_explain)

    p_boost = sub.add_parser("boost", help="write boosted scores")
    _add_common(p_boost)
    _add_metric(p_boost)
    _add_explainer(p_boost)
    _add_params(p_boost)

    p_cal = sub.add_parser("calibrate", help="grid-search p/w on a calibration set")
    _add_common(p_cal)
    _add_metric(p_cal)
    _add_explainer(p_cal)
    _add_objective(p_cal)
    p_cal.add_argument("--details", type=Path, default=None, help="also dump improving cells/baselines JSON")

    p_eval = sub.add_parser("evaluate", help="meta-evaluate boosted vs original")
    _add_common(p_eval)
    _add_metric(p_eval)
    _add_explainer(p_eval)
    _add_params(p_eval)
    _add_objective(p_eval)
    p_eval.add_argument("--resamples", type=int, default=1000, help="permutation resamples (default 1000)")

    p_stab = sub.add_parser("stability", help="seed-stability of boosted scores")
    _add_common(p_stab)
    _add_metric(p_stab)
    _add_explainer(p_stab)
    _add_params(p_stab)
    p_stab.add_argument("--repeats", type=int, default=2, help="number of re-runs (default 2)")

    p_split = sub.add_parser("split", help="write a calibration/evaluation split plan")
    _add_common(p_split)
    p_split.add_argument("--folds", type=int, default=8, help="number of folds (default 8)")

    return parser


def _merge_explainer(args: argparse.Namespace, base: ExplainerConfig | None, seed: int) -> ExplainerConfig:
    """Explicit flags override the profile's explainer, which overrides defaults."""
    base = base if base is not None else ExplainerConfig()
    kind = getattr(args, "explainer", None)
    samples = getattr(args, "samples", None)
    replacement = getattr(args, "replacement_token", None)
    cutoff = getattr(args, "exact_shap_max_tokens", None)
    return ExplainerConfig(
        kind=kind if kind is not None else base.kind,
        permutations=samples if samples is not None else base.permutations,
        replacement_token=replacement if replacement is not None else base.replacement_token,
        seed=seed,
        exact_shap_max_tokens=cutoff if cutoff is not None else base.exact_shap_max_tokens,
    )


def _build_config(args: argparse.Namespace) -> RunConfig:
    profile_path = getattr(args, "profile", None)
    profile = read_profile(profile_path) if profile_path else None
    profile_explainer = profile["explainer"] if profile else None
    seed = args.seed
    if seed is None:
        seed = profile_explainer.seed if profile_explainer is not None else 0
    explainer = _merge_explainer(args, profile_explainer, seed)
    p = getattr(args, "p", None)
    w = getattr(args, "w", None)
    if profile is not None:
        p = p if p is not None else profile["p"]
        w = w if w is not None else profile["w"]
    metric = getattr(args, "metric", None)
    endpoint = getattr(args, "endpoint", None)
    if metric is not None and endpoint is not None:
        raise UsageError("pass either --metric or --endpoint, not both")
    return RunConfig(
        command=args.command,
        dataset=args.dataset,
        format=args.format,
        metric=metric,
        endpoint=endpoint,
        explainer=explainer,
        p=p,
        w=w,
        iterations=getattr(args, "iterations", 1),
        profile=profile_path,
        folds=getattr(args, "folds", 8),
        seed=seed,
        jobs=args.jobs,
        out=args.out,
        aspects=getattr(args, "aspect", None) or [],
        coefficient=getattr(args, "coefficient", "pearson"),
        level=getattr(args, "level", "segment"),
        resamples=getattr(args, "resamples", 1000),
        repeats=getattr(args, "repeats", 2),
        details=getattr(args, "details", None),
    )


def _open_metric(cfg: RunConfig) -> MetricHandle:
    if cfg.endpoint is not None:
        return external_metric(cfg.endpoint)
    return builtin_metric(cfg.metric if cfg.metric is not None else "token_f1")


def _load(cfg: RunConfig) -> Dataset:
    return load_dataset(cfg.dataset, format=cfg.format)


def _boost_params(cfg: RunConfig) -> BoostParams:
    try:
        return BoostParams(
            p=cfg.p if cfg.p is not None else 1.0,
            w=cfg.w if cfg.w is not None else 0.5,
            iterations=cfg.iterations,
            explainer=cfg.explainer,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _objectives(cfg: RunConfig, dataset: Dataset) -> list[CorrelationSpec]:
    aspects = cfg.aspects
    if not aspects:
        available = dataset.aspects()
        if len(available) == 1:
            aspects = available
        elif not available:
            raise DatasetError(f"dataset {dataset.name!r} carries no human scores")
        else:
            raise UsageError(
                f"dataset has multiple aspects {available}; pass --aspect (repeatable)"
            )
    return [CorrelationSpec(cfg.coefficient, cfg.level, a) for a in aspects]


def _write_text(cfg_out: Path | None, text: str) -> None:
    if not text.endswith("\n"):
        text += "\n"
    if cfg_out is None:
        sys.stdout.write(text)
    else:
        cfg_out.write_text(text, encoding="utf-8")


def _dump_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)


def _dump_jsonl(rows: Sequence[dict]) -> str:
    return "\n".join(json.dumps(row, sort_keys=True, ensure_ascii=False) for row in rows)


def _progress(message: str) -> None:
    print(message, file=sys.stderr)


def cmd_score(cfg: RunConfig) -> int:
    dataset = _load(cfg)
    with _open_metric(cfg) as metric:
        scores = score_instances(metric, list(dataset.instances))
    rows = [
        {"id": inst.instance_id, "s0": float(score)}
        for inst, score in zip(dataset.instances, scores)
    ]
    _write_text(cfg.out, _dump_jsonl(rows) if rows else "")
    _progress(f"scored {len(rows)} instances with {cfg.metric or cfg.endpoint or 'token_f1'}")
    return 0


def cmd_explain(cfg: RunConfig) -> int:
    dataset = _load(cfg)
    with _open_metric(cfg) as metric:
        if cfg.jobs > 1 and len(dataset) > 1:
            with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                attributions = list(
                    pool.map(lambda inst: explain(metric, inst, cfg.explainer), dataset.instances)
                )
        else:
            attributions = [explain(metric, inst, cfg.explainer) for inst in dataset.instances]
    rows = [
        {
            "id": inst.instance_id,
            "base_score": attribution.base_score,
            "per_segment": [[float(v) for v in vec] for vec in attribution.per_segment],
        }
        for inst, attribution in zip(dataset.instances, attributions)
    ]
    _write_text(cfg.out, _dump_jsonl(rows) if rows else "")
    _progress(f"explained {len(rows)} instances with {cfg.explainer.kind}")
    return 0


def cmd_boost(cfg: RunConfig) -> int:
    dataset = _load(cfg)
    params = _boost_params(cfg)
    with _open_metric(cfg) as metric:
        scored = boost_dataset(metric, dataset, params, jobs=cfg.jobs)
    rows = [
        {"id": s.instance_id, "s0": s.s0, "s_hat": s.s_hat, "s1": s.s1}
        for s in scored
    ]
    _write_text(cfg.out, _dump_jsonl(rows) if rows else "")
    _progress(f"boosted {len(rows)} instances (p={params.p:g}, w={params.w:g})")
    return 0


def cmd_calibrate(cfg: RunConfig) -> int:
    dataset = _load(cfg)
    with _open_metric(cfg) as metric:
        objectives = _objectives(cfg, dataset)
        result = grid_search(
            metric, dataset, cfg.explainer, GridSpec(), objective=objectives, jobs=cfg.jobs
        )
        metric_name = metric.name
    payload = profile_dict(result.p, result.w, result.explainer, metric_name, result.objectives)
    _write_text(cfg.out, _dump_json(payload))
    if cfg.details is not None:
        details = {
            "fallback_used": result.fallback_used,
            "cells_swept": result.cells_swept,
            "n_improving": len(result.improving),
            "improving": [list(cell) for cell in result.improving],
            "baselines": [
                {
                    "group": key[0],
                    "aspect": key[1],
                    "coefficient": key[2],
                    "level": key[3],
                    "correlation": value,
                }
                for key, value in result.baselines.items()
            ],
        }
        cfg.details.write_text(_dump_json(details) + "\n", encoding="utf-8")
    _progress(
        f"calibrated: p={result.p:g} w={result.w:g} "
        f"({len(result.improving)} improving cells, fallback={result.fallback_used})"
    )
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    dataset = _load(cfg)
    params = _boost_params(cfg)
    with _open_metric(cfg) as metric:
        specs = _objectives(cfg, dataset)
        report = evaluate(
            metric,
            dataset,
            params,
            specs,
            resamples=cfg.resamples,
            seed=cfg.seed,
            jobs=cfg.jobs,
        )
    if cfg.out is not None:
        cfg.out.write_text(_dump_json(report.to_json_dict()) + "\n", encoding="utf-8")
        sys.stdout.write(report.to_text_table() + "\n")
    else:
        sys.stdout.write(_dump_json(report.to_json_dict()) + "\n")
        _progress(report.to_text_table())
    return 0


def cmd_stability(cfg: RunConfig) -> int:
    dataset = _load(cfg)
    params = _boost_params(cfg)
    seeds = list(range(cfg.seed, cfg.seed + cfg.repeats))
    with _open_metric(cfg) as metric:
        mean_corr = stability_check(metric, dataset, params, seeds=seeds, jobs=cfg.jobs)
    payload = {"mean_pairwise_pearson": mean_corr, "repeats": len(seeds), "seeds": seeds}
    _write_text(cfg.out, _dump_json(payload))
    _progress(f"stability over {len(seeds)} runs: {mean_corr:.6f}")
    return 0


def cmd_split(cfg: RunConfig) -> int:
    dataset = _load(cfg)
    plan = make_splits(dataset, cfg.folds, seed=cfg.seed)
    _write_text(cfg.out, _dump_json(plan.to_json_dict()))
    sizes = [len(cal) for cal, _ in plan.folds]
    _progress(f"split into {cfg.folds} folds; calibration sizes {sizes}")
    return 0


_COMMANDS = {
    "score": cmd_score,
    "explain": cmd_explain,
    "boost": cmd_boost,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "stability": cmd_stability,
    "split": cmd_split,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        try:
            cfg = _build_config(args)
        except (ValueError, ExplainerError) as exc:
            # Flag values that fail config validation are usage errors, not
            # data or explainer errors (the dataset has not been touched yet).
            raise UsageError(str(exc)) from exc
        return _COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"metricboost: error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, UndefinedCorrelationError, ValueError) as exc:
        print(f"metricboost: data error: {exc}", file=sys.stderr)
        return 2
    except ExplainerError as exc:
        print(f"metricboost: explainer error: {exc}", file=sys.stderr)
        return 3
    except MetricError as exc:
        where = f" (chunk {exc.chunk_index})" if exc.chunk_index is not None else ""
        print(f"metricboost: metric error{where}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
