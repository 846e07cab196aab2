"""Question answering over a global map, and rendering of the question templates.

Questions and answers are stored as JSON lines. A question line holds
``id, kind, event``, and optionally ``span``, ``options``, ``reference``,
``facing`` and ``text``; an answer line holds ``id``, ``label`` or
``meters``, and ``eval_time``.
"""

from typing import Any, Iterable, Literal, Mapping
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
import json
import logging
import statistics
import string

import yaml

from .base import Degrees, EgofuseError, Meters, Mode, Role, Seconds, Source, wrap_degrees
from .fusion import GlobalMap
from .geometry import (AlloFrame, CameraTrajectory, GeometryError, allocentric_observation, global_to_ego,
                       horizontal_distance, interpolate_pose, quantize_quadrant, quantize_simple)
from .helpers import normalize_label, parse_timestamp
from .tracks import SegConfig, TrackBundle, filter_seg_confidence

logger = logging.getLogger(__name__)


class QuestionKind(Enum):
    """The six question families."""
    EGO_DIR_SIMPLE = "ego_dir_simple"
    """Left, right or back of the camera wearer."""
    EGO_DIR_HARD = "ego_dir_hard"
    """Quadrant around the camera wearer."""
    EGO_DIST = "ego_dist"
    """Distance from the camera wearer."""
    ALLO_DIR_SIMPLE = "allo_dir_simple"
    """Left, right or back of a listener standing by a reference object."""
    ALLO_DIR_HARD = "allo_dir_hard"
    """Quadrant around a listener standing by a reference object."""
    ALLO_DIST = "allo_dist"
    """Distance from the reference object."""

    @property
    def mode(self) -> Mode:
        return Mode.ALLOCENTRIC if self.value.startswith("allo") else Mode.EGOCENTRIC

    @property
    def is_direction(self) -> bool:
        return "_dir_" in self.value

    @property
    def is_simple(self) -> bool:
        return self.value.endswith("_simple")


class QaError(EgofuseError):
    """Base class of the errors raised by this module."""


class UnanswerableError(QaError):
    """The map doesn't locate the target at the evaluation time."""


class ModeMismatchError(QaError):
    """The map was built for another point of view than the question's."""


@dataclass
class MissingPlaceholderError(QaError):
    """The metadata lacks a value required by the template."""
    name: str

    def __str__(self) -> str:
        return f"Missing template value: {self.name}"


@dataclass
class QuestionFormatError(QaError):
    path: str
    line_number: int
    message: str

    def __str__(self) -> str:
        return f"{self.path}:{self.line_number}: {self.message}"


def default_options(kind: QuestionKind) -> tuple[str, ...] | None:
    """Options of the direction kinds, None for the distance kinds."""
    if not kind.is_direction:
        return None
    if kind.is_simple:
        return ("left", "right", "back")
    return ("front-left", "front-right", "back-left", "back-right")


def option_letter(index: int) -> str:
    return string.ascii_uppercase[index]


@dataclass(frozen=True, slots=True)
class Question:
    id: str
    kind: QuestionKind
    event: str
    span: tuple[Seconds, Seconds] | None = None
    """Ground-truth event span, overriding the descriptor span when given."""
    options: tuple[str, ...] | None = None
    """Choices labeled A, B, C... in order."""
    reference: str | None = None
    facing: str | None = None
    text: str = ""

    def __post_init__(self) -> None:
        if self.kind.is_direction and not self.options:
            raise ValueError(f"Question {self.id}: direction questions need options")
        if self.kind.mode is Mode.ALLOCENTRIC and not self.reference:
            raise ValueError(f"Question {self.id}: allocentric questions need a reference object")
        if self.span is not None and not 0 <= self.span[0] < self.span[1]:
            raise ValueError(f"Question {self.id}: invalid span {self.span}")


@dataclass(frozen=True, slots=True)
class Answer:
    """Either a chosen option or a distance."""
    id: str
    label: str | None = None
    """Text of the chosen option."""
    meters: Meters | None = None
    eval_time: Seconds | None = None
    theta: Degrees | None = None
    """Angle behind a direction answer."""

    def __post_init__(self) -> None:
        if (self.label is None) == (self.meters is None):
            raise ValueError(f"Answer {self.id}: exactly one of label and meters is expected")
        if self.meters is not None and self.meters < 0:
            raise ValueError(f"Answer {self.id}: negative distance")


@dataclass(frozen=True, slots=True)
class ResolverConfig:
    eval_time: Literal["midpoint", "start", "peak_energy"] = "midpoint"
    """Instant of the event span where the target is located."""
    sources: frozenset[Source] = frozenset({Source.SD, Source.SEG, Source.AUDIO})
    """Sources voting in :py:func:`.resolve_direct`."""
    seg: SegConfig = SegConfig()

    def __post_init__(self) -> None:
        if self.eval_time not in ("midpoint", "start", "peak_energy"):
            raise ValueError(f"Unknown evaluation time {self.eval_time!r}")


def evaluation_time(span: tuple[Seconds, Seconds], global_map: GlobalMap | None = None,
                    rule: str = "midpoint") -> Seconds:
    """Instant of the span where the question is scored.

    ``peak_energy`` picks the loudest audio segment of the span, the earliest
    on a tie, and falls back to the midpoint without audio."""
    start, end = span
    if rule == "start":
        return start
    if rule == "peak_energy" and global_map is not None:
        levels = [(t, rms) for t, rms in global_map.audio_energy if start <= t <= end]
        if levels:
            return max(levels, key=lambda level: (level[1], -level[0]))[0]
    return (start + end) / 2


def _option_for(label: str, q: Question) -> str:
    assert q.options is not None
    for option in q.options:
        if normalize_label(option) == normalize_label(label):
            return option
    raise UnanswerableError(f"Question {q.id}: {label!r} isn't among the options")


def _direction_label(kind: QuestionKind, theta: Degrees) -> str:
    return quantize_simple(theta) if kind.is_simple else quantize_quadrant(theta)


def resolve(global_map: GlobalMap, q: Question, traj: CameraTrajectory,
            config: ResolverConfig = ResolverConfig()) -> Answer:
    """Answer a question from the map.

    The target is located at the evaluation time of the span, the question
    span when given, else the map span. Egocentric kinds use the camera pose
    at that time, allocentric kinds the reference and facing anchors.

    Raise :py:exc:`.ModeMismatchError` if the map mode differs from the
    question's and :py:exc:`.UnanswerableError` if the target has no position."""
    if global_map.mode is not q.kind.mode:
        raise ModeMismatchError(f"Question {q.id} is {q.kind.mode.value}, the map is {global_map.mode.value}")
    span = q.span if q.span is not None else global_map.span
    t = evaluation_time(span, global_map, config.eval_time)
    target = global_map.target.position_at(t)
    if target is None:
        raise UnanswerableError(f"Question {q.id}: no target position at {t} s")
    try:
        if q.kind.mode is Mode.EGOCENTRIC:
            pose = interpolate_pose(traj, t)
            if not q.kind.is_direction:
                return Answer(q.id, meters=horizontal_distance(target, pose.location), eval_time=t)
            theta = global_to_ego(target, pose, traj.frame_config).theta
        else:
            assert global_map.reference is not None and global_map.facing is not None
            reference = global_map.reference.position
            if not q.kind.is_direction:
                return Answer(q.id, meters=horizontal_distance(target, reference), eval_time=t)
            theta, _ = allocentric_observation(target, AlloFrame(reference, global_map.facing.position))
    except GeometryError as error:
        raise UnanswerableError(f"Question {q.id}: {error}") from None
    return Answer(q.id, label=_option_for(_direction_label(q.kind, theta), q), eval_time=t, theta=theta)


def resolve_direct(bundle: TrackBundle, q: Question, config: ResolverConfig = ResolverConfig()) -> Answer:
    """Answer an egocentric question from the egocentric tracks alone, without a map.

    Every observation of the enabled sources within the span votes for a
    direction label, ties going to the earliest option; distances are the
    median of the ranges."""
    if q.kind.mode is not Mode.EGOCENTRIC:
        raise ModeMismatchError(f"Question {q.id}: only egocentric questions can be answered without a map")
    span = q.span if q.span is not None else bundle.descriptor.span
    start, end = span
    readings: list[tuple[Degrees, Meters | None]] = []
    if Source.SEG in config.sources and Role.TARGET in bundle.seg:
        kept = filter_seg_confidence(bundle.seg[Role.TARGET].observations, Role.TARGET, config.seg)
        readings += [(o.theta, o.r) for o in kept if start <= o.t <= end]
    if Source.SD in config.sources:
        readings += [(k.theta, k.r) for k in bundle.descriptor.target.keyframes if start <= k.t <= end]
    if Source.AUDIO in config.sources:
        readings += [(e.theta, e.r) for e in bundle.audio if start <= e.t <= end]
    midpoint = (start + end) / 2
    if not q.kind.is_direction:
        ranges = [r for _, r in readings if r is not None]
        if not ranges:
            raise UnanswerableError(f"Question {q.id}: no range observed in the span")
        return Answer(q.id, meters=statistics.median(ranges), eval_time=midpoint)
    if not readings:
        raise UnanswerableError(f"Question {q.id}: no direction observed in the span")
    assert q.options is not None
    votes = {option: 0 for option in q.options}
    for theta, _ in readings:
        votes[_option_for(_direction_label(q.kind, theta), q)] += 1
    label = max(q.options, key=lambda option: (votes[option], -q.options.index(option)))  # type: ignore[union-attr]
    theta = wrap_degrees(statistics.median(theta for theta, _ in readings))
    return Answer(q.id, label=label, eval_time=midpoint, theta=theta)


def _load_templates() -> dict[str, dict[str, str]]:
    text = resources.files("egofuse.resources").joinpath("templates.yaml").read_text(encoding="utf-8")
    templates: dict[str, dict[str, str]] = yaml.safe_load(text)
    return templates


def render_question(kind: QuestionKind, metadata: Mapping[str, str]) -> str:
    """Fill the template of the kind.

    The speech variant is used when the metadata has a ``speech_topic``, the
    sound event variant when it has a ``sound_event``. Raise
    :py:exc:`.MissingPlaceholderError` naming the first missing value."""
    if metadata.get("speech_topic"):
        variant = "speech"
    elif metadata.get("sound_event"):
        variant = "sound"
    else:
        raise MissingPlaceholderError("sound_event")
    template = _load_templates()[kind.value][variant]
    for _, name, _, _ in string.Formatter().parse(template):
        if name is not None and not metadata.get(name):
            raise MissingPlaceholderError(name)
    return template.format_map(metadata)


def _span_of(value: Any) -> tuple[Seconds, Seconds] | None:
    if value is None:
        return None
    start, end = value
    return (parse_timestamp(start), parse_timestamp(end))


def question_from_dict(data: Mapping[str, Any]) -> Question:
    kind = QuestionKind(data["kind"])
    options = data.get("options")
    return Question(
        str(data["id"]),
        kind,
        str(data.get("event", "")),
        _span_of(data.get("span")),
        tuple(options) if options else default_options(kind),
        data.get("reference"),
        data.get("facing"),
        str(data.get("text", "")),
    )


def question_to_dict(q: Question) -> dict[str, Any]:
    data: dict[str, Any] = {"id": q.id, "kind": q.kind.value, "event": q.event}
    if q.span is not None:
        data["span"] = list(q.span)
    if q.options is not None:
        data["options"] = list(q.options)
    if q.reference is not None:
        data["reference"] = q.reference
    if q.facing is not None:
        data["facing"] = q.facing
    if q.text:
        data["text"] = q.text
    return data


def read_questions(file: str | Path) -> list[Question]:
    """Read a question file. Raise :py:exc:`.QuestionFormatError` on an invalid line."""
    questions = []
    with open(file, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                questions.append(question_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as error:
                raise QuestionFormatError(str(file), line_number, str(error)) from None
    return questions


def write_questions(questions: Iterable[Question], file: str | Path) -> None:
    with open(file, "w", encoding="utf-8") as f:
        for q in questions:
            f.write(json.dumps(question_to_dict(q)) + "\n")


def answer_to_dict(answer: Answer) -> dict[str, Any]:
    data: dict[str, Any] = {"id": answer.id}
    if answer.label is not None:
        data["label"] = answer.label
    else:
        assert answer.meters is not None
        data["meters"] = round(answer.meters, 2)
    if answer.eval_time is not None:
        data["eval_time"] = answer.eval_time
    return data


def write_answers(answers: Iterable[Answer], file: str | Path) -> None:
    """Write answers, distances rounded to the centimeter."""
    with open(file, "w", encoding="utf-8") as f:
        for answer in answers:
            f.write(json.dumps(answer_to_dict(answer)) + "\n")


def read_answers(file: str | Path) -> dict[str, str]:
    """Read an answer file as raw predictions: the label, or the distance as text.

    Predictions are kept as text so free-form model answers are scored the same way."""
    predictions: dict[str, str] = {}
    with open(file, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                value = data.get("label", data.get("meters"))
                predictions[str(data["id"])] = "" if value is None else str(value)
            except (json.JSONDecodeError, KeyError, AttributeError) as error:
                raise QuestionFormatError(str(file), line_number, str(error)) from None
    return predictions
