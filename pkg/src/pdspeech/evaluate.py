"""Metrics, cross-fold aggregation, unit aggregation, and prediction fusion.

Five metrics per fold (accuracy, macro F1, ROC-AUC, sensitivity,
specificity), reported at segment, clip, and speaker level, with cross-fold
mean and sample standard deviation. Fusion averages per-key probabilities
across models. Undefined metrics (empty denominators, single-class folds)
are flagged rather than silently zeroed.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import ClipRecord, SpeakerRecord
from .errors import EvaluationError, FusionError

METRIC_NAMES = ("accuracy", "f1_macro", "roc_auc", "sensitivity", "specificity")
LEVELS = ("segment", "clip", "speaker")
DEFAULT_THRESHOLD = 0.5


@dataclass
class PredictionRecord:
    clip_id: str
    speaker_id: str
    segment_idx: int
    prob: float
    fold: int
    model: str
    enhancement: str = "raw"

    def __post_init__(self) -> None:
        if not math.isfinite(self.prob) or not 0.0 < self.prob < 1.0:
            raise EvaluationError(
                f"prediction for {self.clip_id}/{self.segment_idx} has "
                f"probability {self.prob!r} outside (0, 1)")


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(PredictionRecord(**json.loads(line)))
        except (TypeError, ValueError, KeyError) as exc:
            raise EvaluationError(f"{path} line {lineno}: {exc}") from exc
    if not records:
        raise EvaluationError(f"no prediction records in {path}")
    return records


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class UnitScore:
    unit_id: str
    prob: float
    label: int
    fold: int


def aggregate_to_unit(records: list[PredictionRecord], level: str,
                      speakers: list[SpeakerRecord],
                      clips: list[ClipRecord]) -> list[UnitScore]:
    """Roll segment probabilities up to the requested unit.

    Clip probability is the mean over its segments; speaker probability is
    the mean over its clip probabilities. Labels join through the manifest
    records; a prediction for an unknown clip or speaker is an error.
    """
    if level not in LEVELS:
        raise EvaluationError(f"unknown aggregation level {level!r}")
    if not records:
        raise EvaluationError("no prediction records to aggregate")
    label_of = {s.speaker_id: s.label for s in speakers}
    speaker_of = {c.clip_id: c.speaker_id for c in clips}
    for rec in records:
        if rec.clip_id not in speaker_of:
            raise EvaluationError(f"prediction references unknown clip {rec.clip_id!r}")
        if rec.speaker_id not in label_of:
            raise EvaluationError(
                f"prediction references unknown speaker {rec.speaker_id!r}")

    if level == "segment":
        return [UnitScore(f"{r.clip_id}#{r.segment_idx}", r.prob,
                          label_of[r.speaker_id], r.fold) for r in records]

    clip_groups: dict[str, list[PredictionRecord]] = {}
    for rec in records:
        clip_groups.setdefault(rec.clip_id, []).append(rec)
    clip_scores = []
    for clip_id, group in clip_groups.items():
        folds = {r.fold for r in group}
        if len(folds) != 1:
            raise EvaluationError(
                f"clip {clip_id!r} predicted in multiple folds {sorted(folds)}")
        clip_scores.append(UnitScore(clip_id, float(np.mean([r.prob for r in group])),
                                     label_of[group[0].speaker_id], group[0].fold))
    if level == "clip":
        return clip_scores

    speaker_groups: dict[str, list[UnitScore]] = {}
    for score in clip_scores:
        speaker_groups.setdefault(speaker_of[score.unit_id], []).append(score)
    out = []
    for speaker_id, group in speaker_groups.items():
        folds = {s.fold for s in group}
        if len(folds) != 1:
            raise EvaluationError(
                f"speaker {speaker_id!r} predicted in multiple folds {sorted(folds)}")
        out.append(UnitScore(speaker_id, float(np.mean([s.prob for s in group])),
                             label_of[speaker_id], group[0].fold))
    return out


def compute_confusion(pairs: list[tuple[float, int]],
                      threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """Count the confusion matrix, predicting PD when prob >= threshold."""
    if not pairs:
        raise EvaluationError("cannot compute a confusion matrix on no pairs")
    counts = ConfusionCounts()
    for prob, label in pairs:
        predicted = prob >= threshold
        if label == 1:
            counts.tp += predicted
            counts.fn += not predicted
        elif label == 0:
            counts.fp += predicted
            counts.tn += not predicted
        else:
            raise EvaluationError(f"label must be 0 or 1, got {label!r}")
    return counts


@dataclass
class MetricValues:
    accuracy: float | None
    f1_macro: float | None
    roc_auc: float | None
    sensitivity: float | None
    specificity: float | None
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _safe_ratio(num: int, den: int, name: str, flags: list[str]) -> float | None:
    if den == 0:
        flags.append(f"{name}_undefined")
        return None
    return num / den


def compute_metrics(counts: ConfusionCounts,
                    pairs: list[tuple[float, int]] | None = None) -> MetricValues:
    """Accuracy, macro F1, sensitivity, specificity from confusion counts.

    Per-class F1 uses the direct form 2*tp / (2*tp + fp + fn), which is the
    harmonic precision/recall mean without the 0/0 ambiguity. Undefined
    ratios surface as None plus a flag. ROC-AUC is filled in separately by
    :func:`roc_auc` when ``pairs`` is given and both classes are present.
    """
    if counts.total == 0:
        raise EvaluationError("metrics over an empty population are undefined")
    if pairs is not None and len(pairs) != counts.total:
        raise EvaluationError(
            f"counts cover {counts.total} items but got {len(pairs)} pairs")
    flags: list[str] = []
    sensitivity = _safe_ratio(counts.tp, counts.tp + counts.fn, "sensitivity", flags)
    specificity = _safe_ratio(counts.tn, counts.tn + counts.fp, "specificity", flags)
    accuracy = (counts.tp + counts.tn) / counts.total
    f1_pd = _safe_ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn,
                        "f1_pd", flags)
    f1_hc = _safe_ratio(2 * counts.tn, 2 * counts.tn + counts.fn + counts.fp,
                        "f1_hc", flags)
    f1_macro = None if f1_pd is None or f1_hc is None else (f1_pd + f1_hc) / 2
    auc: float | None = None
    if pairs is not None:
        try:
            auc = roc_auc(pairs)
        except EvaluationError:
            flags.append("roc_auc_undefined")
    return MetricValues(accuracy=accuracy, f1_macro=f1_macro, roc_auc=auc,
                        sensitivity=sensitivity, specificity=specificity,
                        flags=flags)


def roc_auc(pairs: list[tuple[float, int]]) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) statistic.

    Equals the fraction of (positive, negative) pairs where the positive
    scores higher, counting ties as one half. Requires both classes.
    """
    probs = np.array([p for p, _ in pairs], dtype=np.float64)
    labels = np.array([y for _, y in pairs])
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC-AUC needs both classes present")
    order = np.argsort(probs, kind="stable")
    ranks = np.empty(len(probs), dtype=np.float64)
    ranks[order] = np.arange(1, len(probs) + 1)
    # average the ranks of tied scores
    sorted_probs = probs[order]
    i = 0
    while i < len(sorted_probs):
        j = i
        while j + 1 < len(sorted_probs) and sorted_probs[j + 1] == sorted_probs[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class FoldMetrics:
    fold: int
    n_units: int
    values: MetricValues


@dataclass
class AggregateMetrics:
    mean: dict[str, float | None]
    std: dict[str, float | None]
    flags: list[str] = field(default_factory=list)


def aggregate_folds(rows: list[FoldMetrics]) -> AggregateMetrics:
    """Cross-fold mean and sample (n-1) standard deviation per metric."""
    if not rows:
        raise EvaluationError("no fold rows to aggregate")
    flags: list[str] = []
    mean: dict[str, float | None] = {}
    std: dict[str, float | None] = {}
    if len(rows) == 1:
        flags.append("single_fold_degenerate_std")
    for name in METRIC_NAMES:
        values = [getattr(r.values, name) for r in rows]
        defined = [v for v in values if v is not None]
        if len(defined) < len(values):
            flags.append(f"{name}_undefined_in_some_folds")
        if not defined:
            mean[name] = None
            std[name] = None
            continue
        mean[name] = float(np.mean(defined))
        std[name] = 0.0 if len(defined) == 1 else float(np.std(defined, ddof=1))
    return AggregateMetrics(mean=mean, std=std, flags=flags)


def metrics_by_fold(scores: list[UnitScore],
                    threshold: float = DEFAULT_THRESHOLD) -> list[FoldMetrics]:
    by_fold: dict[int, list[UnitScore]] = {}
    for score in scores:
        by_fold.setdefault(score.fold, []).append(score)
    rows = []
    for fold in sorted(by_fold):
        pairs = [(s.prob, s.label) for s in by_fold[fold]]
        counts = compute_confusion(pairs, threshold)
        rows.append(FoldMetrics(fold=fold, n_units=len(pairs),
                                values=compute_metrics(counts, pairs)))
    return rows


def build_report(records: list[PredictionRecord], speakers: list[SpeakerRecord],
                 clips: list[ClipRecord], levels: tuple[str, ...] = LEVELS,
                 threshold: float = DEFAULT_THRESHOLD) -> dict:
    """Full metrics report: per-fold rows plus aggregate, per evaluation level."""
    report: dict = {"threshold": threshold, "n_records": len(records), "levels": {}}
    for level in levels:
        scores = aggregate_to_unit(records, level, speakers, clips)
        rows = metrics_by_fold(scores, threshold)
        aggregate = aggregate_folds(rows)
        report["levels"][level] = {
            "folds": [{"fold": r.fold, "n_units": r.n_units, **r.values.as_dict()}
                      for r in rows],
            "aggregate": dataclasses.asdict(aggregate),
        }
    return report


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def render_table(report: dict) -> str:
    """Aligned text table of aggregate metrics (mean +- std), one row per level."""
    header = ["Level", "Accuracy", "F1-score", "ROC-AUC", "Sensitivity", "Specificity"]
    lines = []
    for level, payload in report["levels"].items():
        agg = payload["aggregate"]
        cells = [level]
        for name in METRIC_NAMES:
            m, s = agg["mean"][name], agg["std"][name]
            cells.append("undefined" if m is None
                         else f"{m:.4f} +- {0.0 if s is None else s:.4f}")
        lines.append(cells)
    widths = [max(len(row[i]) for row in [header] + lines) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*header)]
    out += [fmt.format(*row) for row in lines]
    return "\n".join(out) + "\n"


def fuse(prediction_sets: list[list[PredictionRecord]]) -> list[PredictionRecord]:
    """Average probabilities across models over an identical key set.

    Keys are (clip_id, segment_idx). Any mismatch fails with the missing
    keys enumerated. Per-key sums use exact (fsum) accumulation, so fusion
    is bit-for-bit independent of model order; the fused model tag joins
    the distinct model names sorted, e.g. ``"hubert+wavlm"``.
    """
    if len(prediction_sets) < 2:
        raise FusionError("fusion needs at least two prediction sets")
    keyed: list[dict[tuple[str, int], PredictionRecord]] = []
    for i, records in enumerate(prediction_sets):
        mapping: dict[tuple[str, int], PredictionRecord] = {}
        for rec in records:
            key = (rec.clip_id, rec.segment_idx)
            if key in mapping:
                raise FusionError(f"set {i}: duplicate key {key}")
            mapping[key] = rec
        keyed.append(mapping)
    base_keys = set(keyed[0])
    for i, mapping in enumerate(keyed[1:], start=1):
        missing = sorted(base_keys - set(mapping))
        extra = sorted(set(mapping) - base_keys)
        if missing or extra:
            raise FusionError(
                f"key sets differ between set 0 and set {i}: "
                f"missing {missing[:10]}, unexpected {extra[:10]}")

    model_tag = "+".join(sorted({r.model for m in keyed for r in m.values()}))
    enh_tag = "+".join(sorted({r.enhancement for m in keyed for r in m.values()}))
    fused = []
    for key in sorted(base_keys):
        members = [m[key] for m in keyed]
        ref = members[0]
        for rec in members[1:]:
            if rec.speaker_id != ref.speaker_id or rec.fold != ref.fold:
                raise FusionError(
                    f"records for key {key} disagree on speaker or fold")
        prob = math.fsum(r.prob for r in members) / len(members)
        fused.append(PredictionRecord(
            clip_id=ref.clip_id, speaker_id=ref.speaker_id,
            segment_idx=ref.segment_idx, prob=prob, fold=ref.fold,
            model=model_tag, enhancement=enh_tag))
    return fused
