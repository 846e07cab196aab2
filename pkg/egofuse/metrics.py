"""Scoring of answers, temporal grounding and sound localization.

Comparisons against thresholds allow a 1e-9 tolerance, so a distance error of
exactly 0.5 m passes the 0.5 m threshold despite floating point rounding.
"""

from typing import Any, Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
import csv
import json
import logging
import math

import numpy as np

from .base import Degrees, EgofuseError, EgoObservation, Meters, Seconds, wrap_degrees
from .helpers import normalize_label, parse_distance
from .qa import Question, QuestionKind, option_letter

logger = logging.getLogger(__name__)

_EPSILON = 1e-9

TASK_COLUMNS: dict[str, tuple[QuestionKind, ...]] = {
    "Ego Dir": (QuestionKind.EGO_DIR_SIMPLE, QuestionKind.EGO_DIR_HARD),
    "Ego Dist": (QuestionKind.EGO_DIST,),
    "Allo Dir": (QuestionKind.ALLO_DIR_SIMPLE, QuestionKind.ALLO_DIR_HARD),
    "Allo Dist": (QuestionKind.ALLO_DIST,),
}
"""Report columns and the question kinds they average."""


class MetricsError(EgofuseError):
    """Base class of the errors raised by this module."""


@dataclass
class UnknownIdError(MetricsError):
    """Predictions or ground truths don't match the question ids."""
    ids: list[str]

    def __str__(self) -> str:
        return f"Unknown or unmatched ids: {', '.join(self.ids)}"


class EmptyPredictionsError(MetricsError):
    """Nothing to score."""


class LengthMismatchError(MetricsError):
    """Predictions and ground truths differ in length."""


@dataclass(frozen=True, slots=True)
class MetricsConfig:
    dist_thresholds: tuple[Meters, ...] = tuple(round(0.1 * k, 10) for k in range(1, 11))
    iou_thresholds: tuple[float, ...] = tuple(round(0.05 * k, 10) for k in range(1, 11))
    loc_theta_max: Degrees = 45.0
    loc_r_max: Meters = 1.0

    def __post_init__(self) -> None:
        for name in ("dist_thresholds", "iou_thresholds"):
            values = getattr(self, name)
            if not values or any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"{name} must be non-empty and strictly increasing")


def mcq_score(pred: str, gt: str, options: Sequence[str]) -> int:
    """1 if the prediction names the ground-truth option, by letter, by text
    or by both ("D. back-right"), ignoring case and punctuation; else 0.
    A ground truth missing from the options is only matched by its text."""
    answer = normalize_label(pred)
    text = normalize_label(gt)
    if not answer:
        return 0
    normalized = [normalize_label(option) for option in options]
    if text not in normalized:
        return int(answer == text)
    letter = option_letter(normalized.index(text)).lower()
    return int(answer in (letter, text, f"{letter} {text}"))


def distance_score(pred: str | float, gt: Meters, config: MetricsConfig = MetricsConfig()) -> float:
    """Fraction of the distance thresholds within which the prediction falls.
    A prediction that isn't a number scores 0."""
    if gt <= 0:
        raise ValueError(f"Ground-truth distance must be positive, got {gt}")
    try:
        value = parse_distance(pred)
    except ValueError:
        return 0.0
    if not math.isfinite(value):
        return 0.0
    error = abs(value - gt)
    return sum(error <= tau + _EPSILON for tau in config.dist_thresholds) / len(config.dist_thresholds)


def interval_iou(a: tuple[Seconds, Seconds], b: tuple[Seconds, Seconds]) -> float:
    """Intersection over union of two time intervals."""
    if not (a[0] < a[1] and b[0] < b[1]):
        raise ValueError(f"Invalid intervals: {a}, {b}")
    intersection = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return intersection / union


@dataclass(frozen=True, slots=True)
class TemporalRecall:
    thresholds: tuple[float, ...]
    recalls: tuple[float, ...]
    """Fraction of the predictions with an IoU at or above each threshold."""
    mean: float
    """The t-mIoU, mean of the recalls."""


def t_miou(preds: Sequence[tuple[Seconds, Seconds]], gts: Sequence[tuple[Seconds, Seconds]],
           config: MetricsConfig = MetricsConfig()) -> TemporalRecall:
    """Recall at 1 of the predicted spans for each IoU threshold, and their mean."""
    if len(preds) != len(gts):
        raise LengthMismatchError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise EmptyPredictionsError("No span to score")
    ious = [interval_iou(p, g) for p, g in zip(preds, gts)]
    recalls = tuple(sum(iou >= tau - _EPSILON for iou in ious) / len(ious) for tau in config.iou_thresholds)
    return TemporalRecall(config.iou_thresholds, recalls, float(np.mean(recalls)))


@dataclass(frozen=True, slots=True)
class LocResult:
    correct: bool
    theta_err: Degrees
    r_err: Meters


def angular_error(a: Degrees, b: Degrees) -> Degrees:
    """Absolute difference of two directions, in ``[0, 180]``."""
    return abs(wrap_degrees(a - b))


def loc_accuracy(pred: EgoObservation, gt: EgoObservation, config: MetricsConfig = MetricsConfig()) -> LocResult:
    """A localization is correct when both errors are strictly below their thresholds."""
    theta_err = angular_error(pred.theta, gt.theta)
    r_err = abs(pred.r - gt.r)
    return LocResult(theta_err < config.loc_theta_max and r_err < config.loc_r_max, theta_err, r_err)


def lr_fb_accuracy(pred_phi: Degrees, gt_phi: Degrees) -> tuple[int, int]:
    """Whether the prediction is on the correct side, left/right and front/back.

    A ground truth exactly on an axis counts as correct for the ambiguous side."""
    results = []
    for component in (math.sin, math.cos):
        truth = component(math.radians(gt_phi))
        if abs(truth) < _EPSILON:
            logger.debug("Ground truth %.1f° on an axis, side counted as correct", gt_phi)
            results.append(1)
            continue
        results.append(int(math.copysign(1, component(math.radians(pred_phi))) == math.copysign(1, truth)
                           and abs(component(math.radians(pred_phi))) >= _EPSILON))
    return results[0], results[1]


@dataclass(frozen=True, slots=True)
class ItemScore:
    id: str
    kind: QuestionKind
    score: float
    prediction: str | None
    truth: str


@dataclass(frozen=True, slots=True)
class EvalReport:
    per_kind: dict[str, float]
    counts: dict[str, int]
    columns: dict[str, float]
    """Accuracy per report column, for the columns with questions."""
    overall: float
    """Mean of the columns."""
    items: tuple[ItemScore, ...]
    config: dict[str, Any]


def evaluate_run(questions: Sequence[Question], predictions: Mapping[str, str], gts: Mapping[str, str],
                 config: MetricsConfig = MetricsConfig()) -> EvalReport:
    """Score the predictions of a run, as text like answer files hold them.

    A question without prediction scores 0. Raise :py:exc:`.UnknownIdError`
    for predictions of unknown questions or questions without ground truth."""
    if not predictions:
        raise EmptyPredictionsError("No prediction to score")
    ids = {q.id for q in questions}
    unknown = sorted(set(predictions) - ids) + sorted(ids - set(gts))
    if unknown:
        raise UnknownIdError(unknown)
    items = []
    for q in questions:
        prediction = predictions.get(q.id)
        truth = gts[q.id]
        if prediction is None:
            logger.warning("No prediction for question %s", q.id)
            score = 0.0
        elif q.kind.is_direction:
            assert q.options is not None
            score = float(mcq_score(prediction, truth, q.options))
        else:
            score = distance_score(prediction, parse_distance(truth), config)
        items.append(ItemScore(q.id, q.kind, score, prediction, truth))

    per_kind: dict[str, float] = {}
    counts: dict[str, int] = {}
    for kind in QuestionKind:
        scores = [item.score for item in items if item.kind is kind]
        if scores:
            per_kind[kind.value] = float(np.mean(scores))
            counts[kind.value] = len(scores)
    columns: dict[str, float] = {}
    for column, kinds in TASK_COLUMNS.items():
        scores = [item.score for item in items if item.kind in kinds]
        if scores:
            columns[column] = float(np.mean(scores))
    overall = float(np.mean(list(columns.values()))) if columns else 0.0
    return EvalReport(per_kind, counts, columns, overall, tuple(items), asdict(config))


@dataclass(frozen=True, slots=True)
class DoaReport:
    matched: int
    median_error: Degrees
    p95_error: Degrees
    lr_accuracy: float
    fb_accuracy: float
    loc_acc: float | None
    """None when no prediction has a range."""


def evaluate_doa(predictions: Iterable[tuple[Seconds, Degrees, Meters | None]],
                 truth: Sequence[EgoObservation], tolerance: Seconds = 0.125,
                 config: MetricsConfig = MetricsConfig()) -> DoaReport:
    """Compare a direction track with ground-truth samples, each prediction to
    the sample nearest in time within ``tolerance``."""
    errors, lr, fb, loc = [], [], [], []
    for t, phi, r in predictions:
        if not truth:
            break
        nearest = min(truth, key=lambda sample: (abs(sample.t - t), sample.t))
        if abs(nearest.t - t) > tolerance:
            continue
        errors.append(angular_error(phi, nearest.theta))
        left_right, front_back = lr_fb_accuracy(phi, nearest.theta)
        lr.append(left_right)
        fb.append(front_back)
        if r is not None:
            loc.append(loc_accuracy(EgoObservation(nearest.t, phi, r), nearest, config).correct)
    if not errors:
        raise EmptyPredictionsError("No prediction matches a ground-truth sample")
    return DoaReport(len(errors), float(np.median(errors)), float(np.percentile(errors, 95)),
                     float(np.mean(lr)), float(np.mean(fb)), float(np.mean(loc)) if loc else None)


def read_angle_track(file: str | Path) -> list[tuple[Seconds, Degrees, Meters | None]]:
    """Read ``t``, ``phi_deg`` or ``theta_deg``, and optionally ``r_m`` columns of a CSV file."""
    rows = []
    with open(file, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f, skipinitialspace=True):
            angle = row.get("phi_deg") or row.get("theta_deg")
            if angle is None:
                raise ValueError(f"{file}: no direction column")
            r = (row.get("r_m") or "").strip()
            rows.append((float(row["t"]), float(angle), float(r) if r else None))
    return rows


def render_report(report: EvalReport) -> str:
    """Text table with one column per task and the overall accuracy, in percent,
    followed by the accuracy of each question kind."""
    headers = list(TASK_COLUMNS) + ["Overall"]
    values = [report.columns.get(column) for column in TASK_COLUMNS] + [report.overall]
    counts = [sum(report.counts.get(kind.value, 0) for kind in kinds) for kinds in TASK_COLUMNS.values()]
    counts.append(sum(counts))
    lines = [
        "".join(f"{header:>11}" for header in [""] + headers),
        "".join(f"{cell:>11}" for cell in ["accuracy"] + ["-" if v is None else f"{100 * v:.1f}" for v in values]),
        "".join(f"{cell:>11}" for cell in ["questions"] + [str(c) for c in counts]),
        "",
    ]
    for kind, accuracy in report.per_kind.items():
        lines.append(f"{kind:<16}{100 * accuracy:6.1f}  ({report.counts[kind]})")
    return "\n".join(lines) + "\n"


def render_doa_report(report: DoaReport) -> str:
    loc = "-" if report.loc_acc is None else f"{100 * report.loc_acc:.1f}"
    return (f"matched      {report.matched}\n"
            f"median error {report.median_error:.1f}\n"
            f"p95 error    {report.p95_error:.1f}\n"
            f"l/r          {100 * report.lr_accuracy:.1f}\n"
            f"f/b          {100 * report.fb_accuracy:.1f}\n"
            f"loc_acc      {loc}\n")


def write_items(report: EvalReport, file: str | Path) -> None:
    """Write the per-question scores as JSON lines."""
    with open(file, "w", encoding="utf-8") as f:
        for item in report.items:
            f.write(json.dumps({"id": item.id, "kind": item.kind.value, "score": item.score,
                                "prediction": item.prediction, "truth": item.truth}) + "\n")
