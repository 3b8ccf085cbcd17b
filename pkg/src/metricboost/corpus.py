"""Dataset model: segments, evaluation instances, loading, and splits.

Datasets are flat collections of scored instances: one machine-generated
hypothesis, one or more ground-truth texts, and a dict of human aspect
scores. Two interchange formats are supported, JSON lines and TSV.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

__all__ = [
    "DatasetError",
    "Segment",
    "EvalInstance",
    "Dataset",
    "SplitPlan",
    "tokenize",
    "load_dataset",
    "save_dataset",
    "make_splits",
]

_TOKEN_RE = re.compile(r"\S+")

_TSV_COLUMNS = ("id", "system", "lp", "gt", "hyp", "score")


class DatasetError(Exception):
    """Raised for malformed input data or impossible data operations."""


def tokenize(text: str) -> list[tuple[str, int]]:
    """Split ``text`` on Unicode whitespace, keeping character offsets.

    Returns ``(token, start_offset)`` pairs. Tokens are maximal runs of
    non-whitespace, so no token is ever empty and joining the tokens with
    single spaces yields the whitespace-normalized text.
    """
    return [(m.group(), m.start()) for m in _TOKEN_RE.finditer(text)]


@dataclass(frozen=True)
class Segment:
    """A single text with its token decomposition."""

    text: str
    tokens: tuple[str, ...]
    offsets: tuple[int, ...]

    @classmethod
    def from_text(cls, text: str) -> "Segment":
        pairs = tokenize(text)
        return cls(
            text=text,
            tokens=tuple(tok for tok, _ in pairs),
            offsets=tuple(off for _, off in pairs),
        )

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Segment":
        """Build a segment from an explicit token sequence (joined by spaces)."""
        toks = tuple(tokens)
        offsets: list[int] = []
        pos = 0
        for tok in toks:
            offsets.append(pos)
            pos += len(tok) + 1
        return cls(text=" ".join(toks), tokens=toks, offsets=tuple(offsets))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class EvalInstance:
    """One system output with its ground truths and human judgements.

    Instances are immutable after construction. ``language_pair`` and
    ``system`` may be empty strings when the corpus does not provide them.
    """

    instance_id: str
    system: str
    language_pair: str
    ground_truths: tuple[Segment, ...]
    hypothesis: Segment
    human_scores: Mapping[str, float] = field(default_factory=dict)

    @property
    def source_key(self) -> str:
        """Stable digest of the first ground truth, used to group instances
        that must never be separated by a calibration/evaluation split."""
        return hashlib.sha256(self.ground_truths[0].text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Dataset:
    """An ordered, immutable collection of evaluation instances."""

    name: str
    instances: tuple[EvalInstance, ...]
    level_hint: str = "both"  # "segment", "system", or "both"

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[EvalInstance]:
        return iter(self.instances)

    def by_id(self, instance_id: str) -> EvalInstance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)

    def aspects(self) -> list[str]:
        seen: dict[str, None] = {}
        for inst in self.instances:
            for aspect in inst.human_scores:
                seen.setdefault(aspect, None)
        return list(seen)

    def language_pairs(self) -> list[str]:
        seen: dict[str, None] = {}
        for inst in self.instances:
            seen.setdefault(inst.language_pair, None)
        return list(seen)

    def subset(self, ids: Iterable[str], name: str | None = None) -> "Dataset":
        wanted = set(ids)
        kept = tuple(i for i in self.instances if i.instance_id in wanted)
        missing = wanted - {i.instance_id for i in kept}
        if missing:
            raise DatasetError(f"unknown instance ids: {sorted(missing)[:5]}")
        return Dataset(name=name or self.name, instances=kept, level_hint=self.level_hint)


def _require(cond: bool, where: str, message: str) -> None:
    if not cond:
        raise DatasetError(f"{where}: {message}")


def _check_human_scores(raw: object, where: str) -> dict[str, float]:
    _require(isinstance(raw, dict), where, "'human' must be an object of aspect -> number")
    out: dict[str, float] = {}
    for aspect, value in raw.items():  # type: ignore[union-attr]
        _require(isinstance(aspect, str) and aspect != "", where, "aspect names must be nonempty strings")
        # bool is an int subclass; reject it explicitly.
        _require(
            isinstance(value, (int, float)) and not isinstance(value, bool),
            where,
            f"human score for {aspect!r} must be a number",
        )
        _require(math.isfinite(float(value)), where, f"human score for {aspect!r} must be finite")
        out[aspect] = float(value)
    return out


def _build_instance(
    where: str,
    instance_id: str,
    system: str,
    language_pair: str,
    gts: Sequence[str],
    hyp: str,
    human: dict[str, float],
) -> EvalInstance:
    _require(len(gts) > 0, where, "at least one ground truth is required")
    gt_segments = []
    for j, text in enumerate(gts):
        seg = Segment.from_text(text)
        _require(len(seg) > 0, where, f"ground truth {j} has no tokens")
        gt_segments.append(seg)
    hyp_segment = Segment.from_text(hyp)
    _require(len(hyp_segment) > 0, where, "hypothesis has no tokens")
    return EvalInstance(
        instance_id=instance_id,
        system=system,
        language_pair=language_pair,
        ground_truths=tuple(gt_segments),
        hypothesis=hyp_segment,
        human_scores=human,
    )


def _load_jsonl(path: Path, name: str) -> Dataset:
    instances: list[EvalInstance] = []
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: invalid JSON ({exc.msg})") from exc
            _require(isinstance(row, dict), where, "each line must be a JSON object")
            for key in ("id", "gts", "hyp"):
                _require(key in row, where, f"missing required field {key!r}")
            instance_id = row["id"]
            _require(isinstance(instance_id, str) and instance_id != "", where, "'id' must be a nonempty string")
            _require(instance_id not in seen_ids, where, f"duplicate instance id {instance_id!r}")
            gts = row["gts"]
            _require(
                isinstance(gts, list) and all(isinstance(g, str) for g in gts),
                where,
                "'gts' must be a list of strings",
            )
            hyp = row["hyp"]
            _require(isinstance(hyp, str), where, "'hyp' must be a string")
            system = row.get("system", "")
            _require(isinstance(system, str), where, "'system' must be a string")
            lp = row.get("lp", "")
            _require(isinstance(lp, str), where, "'lp' must be a string")
            human = _check_human_scores(row.get("human", {}), where)
            instances.append(_build_instance(where, instance_id, system, lp, gts, hyp, human))
            seen_ids.add(instance_id)
    return Dataset(name=name, instances=tuple(instances))


def _load_tsv(path: Path, name: str) -> Dataset:
    instances: list[EvalInstance] = []
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    _require(len(lines) > 0, path.name, "empty TSV file (a header line is required)")
    header = tuple(lines[0].split("\t"))
    _require(
        header == _TSV_COLUMNS,
        f"{path.name}:1",
        f"TSV header must be {list(_TSV_COLUMNS)}, got {list(header)}",
    )
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"{path.name}:{lineno}"
        cells = line.split("\t")
        _require(len(cells) == len(_TSV_COLUMNS), where, f"expected {len(_TSV_COLUMNS)} columns, got {len(cells)}")
        instance_id, system, lp, gt, hyp, score_text = cells
        _require(instance_id != "", where, "'id' must be nonempty")
        _require(instance_id not in seen_ids, where, f"duplicate instance id {instance_id!r}")
        try:
            score = float(score_text)
        except ValueError as exc:
            raise DatasetError(f"{where}: 'score' must be a number, got {score_text!r}") from exc
        _require(math.isfinite(score), where, "'score' must be finite")
        instances.append(_build_instance(where, instance_id, system, lp, [gt], hyp, {"score": score}))
        seen_ids.add(instance_id)
    return Dataset(name=name, instances=tuple(instances))


def load_dataset(path: str | Path, format: str | None = None, name: str | None = None) -> Dataset:
    """Load a dataset from ``path``.

    ``format`` is ``"jsonl"`` or ``"tsv"``; when omitted it is inferred from
    the file suffix. Raises :class:`DatasetError` on malformed rows, naming
    the offending line and field.
    """
    path = Path(path)
    if format is None:
        suffix = path.suffix.lower().lstrip(".")
        format = {"jsonl": "jsonl", "ndjson": "jsonl", "tsv": "tsv"}.get(suffix)
        if format is None:
            raise DatasetError(f"cannot infer format from suffix {path.suffix!r}; pass format='jsonl' or 'tsv'")
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    dataset_name = name or path.stem
    if format == "jsonl":
        return _load_jsonl(path, dataset_name)
    if format == "tsv":
        return _load_tsv(path, dataset_name)
    raise DatasetError(f"unknown dataset format {format!r}")


def save_dataset(dataset: Dataset, path: str | Path, format: str = "jsonl") -> None:
    """Write ``dataset`` to ``path`` in the given format.

    TSV can only represent single-reference, single-aspect data whose one
    aspect is named ``"score"``; anything else raises :class:`DatasetError`.
    """
    path = Path(path)
    if format == "jsonl":
        with path.open("w", encoding="utf-8") as handle:
            for inst in dataset.instances:
                row = {
                    "id": inst.instance_id,
                    "system": inst.system,
                    "lp": inst.language_pair,
                    "gts": [seg.text for seg in inst.ground_truths],
                    "hyp": inst.hypothesis.text,
                    "human": dict(inst.human_scores),
                }
                handle.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
        return
    if format == "tsv":
        with path.open("w", encoding="utf-8") as handle:
            handle.write("\t".join(_TSV_COLUMNS) + "\n")
            for inst in dataset.instances:
                if len(inst.ground_truths) != 1:
                    raise DatasetError(f"{inst.instance_id}: TSV cannot represent multiple ground truths")
                if set(inst.human_scores) != {"score"}:
                    raise DatasetError(f"{inst.instance_id}: TSV requires exactly one aspect named 'score'")
                cells = (
                    inst.instance_id,
                    inst.system,
                    inst.language_pair,
                    inst.ground_truths[0].text,
                    inst.hypothesis.text,
                    repr(inst.human_scores["score"]),
                )
                if any("\t" in c or "\n" in c for c in cells):
                    raise DatasetError(f"{inst.instance_id}: TSV fields may not contain tabs or newlines")
                handle.write("\t".join(cells) + "\n")
        return
    raise DatasetError(f"unknown dataset format {format!r}")


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint calibration/evaluation folds over one dataset.

    Each fold is a pair of instance-id tuples ``(calibration, evaluation)``.
    Within a fold the two parts are disjoint and share no source key, and the
    evaluation part is the exact complement of the calibration part.
    """

    dataset_name: str
    seed: int
    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]

    def to_json_dict(self) -> dict:
        return {
            "dataset": self.dataset_name,
            "seed": self.seed,
            "folds": [
                {"calibration": list(cal), "evaluation": list(ev)} for cal, ev in self.folds
            ],
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "SplitPlan":
        folds = tuple(
            (tuple(f["calibration"]), tuple(f["evaluation"])) for f in data["folds"]
        )
        return cls(dataset_name=data.get("dataset", ""), seed=int(data.get("seed", 0)), folds=folds)


def make_splits(dataset: Dataset, n_folds: int, seed: int = 0) -> SplitPlan:
    """Partition ``dataset`` into ``n_folds`` calibration/evaluation folds.

    Instances are grouped by the digest of their first ground truth so that
    every output for a given source lands on the same side of every fold.
    Groups are shuffled with ``seed`` and dealt greedily: the first
    ``n_folds - 1`` folds take ``ceil(n_groups / n_folds)`` groups each and
    the last fold takes the remainder, so trailing folds may be smaller. Each
    fold's evaluation part is the complement of its calibration part.
    """
    if n_folds < 2:
        raise DatasetError(f"n_folds must be >= 2, got {n_folds}")
    groups: dict[str, list[str]] = {}
    for inst in dataset.instances:
        groups.setdefault(inst.source_key, []).append(inst.instance_id)
    keys = list(groups)
    if len(keys) < n_folds:
        raise DatasetError(f"cannot make {n_folds} folds from {len(keys)} source groups")
    rng = random.Random(seed)
    rng.shuffle(keys)
    chunk = math.ceil(len(keys) / n_folds)
    if (n_folds - 1) * chunk < len(keys):
        parts = [keys[i * chunk : (i + 1) * chunk] for i in range(n_folds)]
    else:
        # Degenerate sizes where greedy ceil-chunks would starve the last
        # fold: fall back to balanced chunks differing by at most one group.
        base, extra = divmod(len(keys), n_folds)
        parts, pos = [], 0
        for i in range(n_folds):
            size = base + (1 if i < extra else 0)
            parts.append(keys[pos : pos + size])
            pos += size
    all_ids = [inst.instance_id for inst in dataset.instances]
    folds = []
    for part in parts:
        chosen = set()
        for key in part:
            chosen.update(groups[key])
        calibration = tuple(i for i in all_ids if i in chosen)
        evaluation = tuple(i for i in all_ids if i not in chosen)
        folds.append((calibration, evaluation))
    return SplitPlan(dataset_name=dataset.name, seed=seed, folds=tuple(folds))
