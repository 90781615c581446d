"""ROC curves, AuROC, error rates and per-variant report tables."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import ATTRIBUTES, CLASS_TITLES, N_CLASSES, NO_NUCLEUS_SHAPE
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

N_ATTR = len(ATTRIBUTES)
SHAPE_CLASSES = tuple(range(N_ATTR, N_CLASSES))
ERROR_RATE_NOTE = (
    "attribute error: micro-average over all (image, attribute) decisions with probability >= 0.5 "
    "counted positive; shape error: fraction of images whose argmax shape differs from the truth"
)


@dataclass(frozen=True)
class ScoredLabel:
    score: float
    truth: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise DataError(f"score must be finite, got {self.score}")
        if self.truth not in (0, 1):
            raise DataError(f"truth must be 0 or 1, got {self.truth}")


def _unpack(samples, truths=None):
    if truths is None:
        samples = list(samples)
        scores = np.array([s.score for s in samples], dtype=np.float64)
        y = np.array([s.truth for s in samples])
    else:
        scores = np.asarray(samples, dtype=np.float64).ravel()
        y = np.asarray(truths).ravel()
        if scores.shape != y.shape:
            raise ConfigError(f"{scores.size} scores for {y.size} truths")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("truths must be 0 or 1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise DataError(
            f"undefined ROC: need at least one positive and one negative (got {n_pos} of {y.size} positive)"
        )
    return scores, y.astype(np.int64)


def roc_curve(samples, truths=None) -> np.ndarray:
    """Points (fpr, tpr) swept over distinct scores, highest first.

    Samples sharing a score enter together, so ties give one diagonal step.
    Accepts a sequence of :class:`ScoredLabel` or parallel score/truth arrays.
    """
    scores, y = _unpack(samples, truths)
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # final index of each score group
    tp = np.cumsum(t)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / tp[-1]]
    fpr = np.r_[0.0, fp / fp[-1]]
    return np.column_stack([fpr, tpr])


def auroc(samples, truths=None) -> float:
    """Trapezoidal area under the tie-grouped ROC curve."""
    pts = roc_curve(samples, truths)
    fpr, tpr = pts[:, 0], pts[:, 1]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)


def error_rates(attr_probs, shape_scores, attr_truth, shape_truth):
    """(attribute error, shape error) with a 0.5 threshold and an argmax."""
    attr_probs, attr_truth = np.asarray(attr_probs), np.asarray(attr_truth)
    shape_scores, shape_truth = np.asarray(shape_scores), np.asarray(shape_truth).ravel()
    if attr_probs.shape != attr_truth.shape:
        raise ConfigError(f"attribute arity mismatch: {attr_probs.shape} vs {attr_truth.shape}")
    if shape_scores.ndim != 2 or shape_scores.shape[0] != shape_truth.shape[0]:
        raise ConfigError(f"shape arity mismatch: {shape_scores.shape} vs {shape_truth.shape}")
    if attr_probs.shape[0] != shape_scores.shape[0]:
        raise ConfigError("attribute and shape predictions cover different image counts")
    attr_err = float(np.mean((attr_probs >= 0.5) != (attr_truth == 1)))
    shape_err = float(np.mean(np.argmax(shape_scores, axis=1) != shape_truth))
    return attr_err, shape_err


def class_scores(attributes, shapes) -> np.ndarray:
    """Score matrix over the 15 evaluation classes (shapes minus no-nucleus)."""
    attributes, shapes = np.asarray(attributes), np.asarray(shapes)
    keep = [i for i in range(shapes.shape[1]) if i != NO_NUCLEUS_SHAPE]
    return np.concatenate([attributes, shapes[:, keep]], axis=1)


@dataclass
class EvaluationReport:
    per_class: dict  # class title -> AuROC, or None when excluded
    mean_auroc: Optional[float]
    mean_shape_auroc: Optional[float]
    attr_error: float
    shape_error: float
    round_index: int = 0
    excluded: list = field(default_factory=list)
    curves: dict = field(default_factory=dict, repr=False)

    def to_dict(self, with_curves=False) -> dict:
        d = asdict(self)
        if not with_curves:
            d.pop("curves")
        else:
            d["curves"] = {k: np.asarray(v).tolist() for k, v in self.curves.items()}
        return d


def _mean(values):
    """Mean of the defined entries, or None when no entry is defined."""
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else None


def evaluate(prediction, class_truth, shape_truth, round_index=0) -> EvaluationReport:
    """Score one round's predictions.

    ``prediction`` has ``attributes`` [N, 10] and ``shapes`` [N, 6];
    ``class_truth`` is the [N, 15] binary class matrix and ``shape_truth`` the
    true shape indices. Classes without both positives and negatives in this
    split are left out of the means.
    """
    class_truth = np.asarray(class_truth)
    scores = class_scores(prediction.attributes, prediction.shapes)
    if scores.shape != class_truth.shape:
        raise ConfigError(f"prediction covers {scores.shape}, truth {class_truth.shape}")
    per_class, curves, excluded = {}, {}, []
    for j, title in enumerate(CLASS_TITLES):
        y = class_truth[:, j]
        if y.min() == y.max():
            log.warning("round %d: class %r has no %s in the test split; excluded from means",
                        round_index, title, "positives" if y.max() == 0 else "negatives")
            per_class[title] = None
            excluded.append(title)
            continue
        curves[title] = roc_curve(scores[:, j], y)
        per_class[title] = auroc(scores[:, j], y)
    attr_err, shape_err = error_rates(
        prediction.attributes, prediction.shapes, class_truth[:, :N_ATTR], shape_truth
    )
    vals = list(per_class.values())
    return EvaluationReport(
        per_class=per_class,
        mean_auroc=_mean(vals),
        mean_shape_auroc=_mean([vals[j] for j in SHAPE_CLASSES]),
        attr_error=attr_err,
        shape_error=shape_err,
        round_index=round_index,
        excluded=excluded,
        curves=curves,
    )


def average_reports(reports: Sequence[EvaluationReport]) -> dict:
    """Per-class AuROC averaged over rounds (rounds that excluded a class skip it)."""
    if not reports:
        raise ConfigError("need at least one round to report")
    classes = list(reports[0].per_class)
    for r in reports[1:]:
        if list(r.per_class) != classes:
            raise DataError(f"round {r.round_index} reports a different class set")
    per_class = {c: _mean([r.per_class[c] for r in reports]) for c in classes}
    vals = list(per_class.values())
    return {
        "per_class": per_class,
        "mean_auroc": _mean(vals),
        "mean_shape_auroc": _mean([vals[j] for j in SHAPE_CLASSES]),
        "attr_error": float(np.mean([r.attr_error for r in reports])),
        "shape_error": float(np.mean([r.shape_error for r in reports])),
        "rounds": len(reports),
    }


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def report(results: Mapping[str, Sequence[EvaluationReport]], out_dir) -> dict:
    """Write report.json, report.csv (classes by variant plus mean and error
    rows) and roc/<variant>_round<k>_<class>.csv point files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {v: average_reports(reps) for v, reps in results.items()}
    classes = None
    for v, s in summary.items():
        if classes is None:
            classes = list(s["per_class"])
        elif list(s["per_class"]) != classes:
            raise DataError(f"variant {v} reports a different class set")
    variants = list(summary)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class"] + variants)
        for c in classes:
            w.writerow([c] + [_fmt(summary[v]["per_class"][c]) for v in variants])
        w.writerow(["Mean AuROC"] + [_fmt(summary[v]["mean_auroc"]) for v in variants])
        w.writerow(["Mean AuROC for Shapes Alone"] + [_fmt(summary[v]["mean_shape_auroc"]) for v in variants])
        w.writerow(["Error Rate on Attr."] + [_fmt(summary[v]["attr_error"]) for v in variants])
        w.writerow(["Error Rate on Shapes"] + [_fmt(summary[v]["shape_error"]) for v in variants])
    doc = {
        "error_rate_definition": ERROR_RATE_NOTE,
        "summary": summary,
        "rounds": {v: [r.to_dict() for r in reps] for v, reps in results.items()},
    }
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")
    roc_dir = out_dir / "roc"
    roc_dir.mkdir(exist_ok=True)
    for v, reps in results.items():
        for r in reps:
            for title, pts in r.curves.items():
                slug = title.lower().replace(" ", "_")
                path = roc_dir / f"{v}_round{r.round_index}_{slug}.csv"
                with open(path, "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["fpr", "tpr"])
                    w.writerows([[f"{a:.10g}", f"{b:.10g}"] for a, b in pts])
    return summary


__all__ = [
    "ERROR_RATE_NOTE",
    "EvaluationReport",
    "ScoredLabel",
    "auroc",
    "average_reports",
    "class_scores",
    "error_rates",
    "evaluate",
    "report",
    "roc_curve",
]
