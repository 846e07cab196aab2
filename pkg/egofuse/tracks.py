"""Stage one inputs: the three egocentric track sources of a question.

* The snapshot descriptor, a JSON object produced by an audio-visual
  language model, names the event span, the question mode and the objects,
  with sparse keyframes for models that track them.
* Segmentation tracks, produced out of process, hold one observation per
  sampled frame and object role.
* The audio track is computed here from the microphone signals.

Descriptor parsing follows a two-level design: recoverable problems become
:py:class:`DescriptorWarning` records returned with the descriptor, anything
else raises :py:exc:`DescriptorError`.
"""

from typing import Any, Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
import csv
import json
import logging
import math
import re

from .audio_doa import (AudioClip, DoaConfig, DoaEstimate, MicArray, SegmentError, discard_forward, segment_starts,
                        srp_phat)
from .audio_range import CdrFrame, RangeCalibration, UndefinedCdrError, WelchConfig, distance_from_cdr, estimate_cdr
from .base import (Degrees, EgofuseError, EgoObservation, Entry, Meters, Mode, ObjectEntry, Role, Seconds,
                   camera_entry)
from .helpers import format_timestamp, parse_direction, parse_distance, parse_timestamp

logger = logging.getLogger(__name__)

_TOP_LEVEL_FIELDS = {
    "event", "start_time", "end_time", "mode", "sounding_object",
    "reference_object", "stand_by_object", "facing_object", "facing_direction",
}
_OBJECT_FIELDS = {"object_name", "description", "is_static", "key_frames"}
_KEYFRAME_FIELDS = {"distance", "direction"}
_REFERENCE_KEYS = ("reference_object", "stand_by_object")
_FACING_KEYS = ("facing_object", "facing_direction")


class DescriptorWarning():
    """Base class of the recoverable descriptor problems."""


@dataclass
class UnknownFieldWarning(DescriptorWarning):
    """A field outside both descriptor schemas, ignored."""
    path: str


@dataclass
class DirectionRangeWarning(DescriptorWarning):
    """A keyframe direction outside the ``[-90, 90]`` range requested from the
    model. The keyframe is kept."""
    path: str
    direction: Degrees


@dataclass
class InvalidKeyframeWarning(DescriptorWarning):
    """A keyframe that couldn't be read, e.g. a non-positive distance. It is dropped."""
    path: str
    message: str


@dataclass
class DescriptorError(EgofuseError):
    """A descriptor that can't be used at all. ``path`` is the dotted field path."""
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}" if self.path else self.message


@dataclass
class MalformedDescriptorError(EgofuseError):
    """Raised by :py:func:`.read_snapshot` in strict mode when there are warnings."""
    warnings: list[DescriptorWarning]


@dataclass(frozen=True, slots=True)
class SnapshotDescriptor:
    """Normalized snapshot descriptor of a question."""
    event: str
    span: tuple[Seconds, Seconds]
    """Start and end of the event."""
    mode: Mode
    target: ObjectEntry
    """The sounding object."""
    reference: Entry = camera_entry
    """The object the listener stands by, or the camera sentinel."""
    facing: Entry = camera_entry
    """The object the listener faces, or the camera sentinel."""

    def __post_init__(self) -> None:
        start, end = self.span
        if not 0 <= start < end:
            raise ValueError(f"Invalid event span: {self.span}")
        if self.mode is Mode.ALLOCENTRIC and not (self.reference and self.facing):
            raise ValueError("An allocentric descriptor needs a reference and a facing object")

    def entry(self, role: Role) -> Entry:
        if role is Role.TARGET:
            return self.target
        if role is Role.REFERENCE:
            return self.reference
        return self.facing


def _extract_object(text: str) -> str:
    start = text.find("{")
    end = text.rfind("}")
    if start < 0 or end <= start:
        raise DescriptorError("", "no JSON object found")
    return text[start:end + 1]


def _relax_json(text: str) -> str:
    """Repair the usual deviations of model output: comments copied from the
    prompt, unquoted modes and trailing commas."""
    text = re.sub(r'("(?:\\.|[^"\\])*")|//[^\n]*', lambda m: m.group(1) or "", text)
    text = re.sub(r'("mode"\s*:\s*)([A-Za-z/]+)', r'\1"\2"', text)
    return re.sub(r",\s*([}\]])", r"\1", text)


def _load_json(text: str) -> Any:
    body = _extract_object(text)
    try:
        return json.loads(body)
    except json.JSONDecodeError:
        pass
    try:
        return json.loads(_relax_json(body))
    except json.JSONDecodeError as error:
        raise DescriptorError("", f"invalid JSON ({error.msg} at line {error.lineno})") from None


def _warn(warnings: list[DescriptorWarning], warning: DescriptorWarning) -> None:
    logger.warning("Descriptor: %s", warning)
    warnings.append(warning)


def _check_fields(data: Mapping[str, Any], known: set[str], prefix: str,
                  warnings: list[DescriptorWarning]) -> None:
    for key in data:
        if key not in known:
            _warn(warnings, UnknownFieldWarning(f"{prefix}{key}"))


def _parse_time(value: Any, path: str) -> Seconds:
    try:
        return parse_timestamp(value)
    except (TypeError, ValueError, AttributeError) as error:
        raise DescriptorError(path, str(error)) from None


def _parse_bool(value: Any, path: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    raise DescriptorError(path, f"expected true or false, got {value!r}")


def _parse_keyframes(value: Any, path: str, warnings: list[DescriptorWarning]) -> tuple[EgoObservation, ...]:
    if value is None:
        return ()
    if not isinstance(value, dict):
        _warn(warnings, InvalidKeyframeWarning(path, "key frames must be an object"))
        return ()
    keyframes: list[EgoObservation] = []
    for time_text, sample in value.items():
        sample_path = f"{path}.{time_text}"
        if not isinstance(sample, dict):
            _warn(warnings, InvalidKeyframeWarning(sample_path, "expected distance and direction"))
            continue
        _check_fields(sample, _KEYFRAME_FIELDS, sample_path + ".", warnings)
        try:
            t = parse_timestamp(time_text)
            r = parse_distance(sample["distance"])
            theta = parse_direction(sample["direction"])
            observation = EgoObservation(t, theta, r)
        except (KeyError, TypeError, ValueError, AttributeError) as error:
            _warn(warnings, InvalidKeyframeWarning(sample_path, str(error)))
            continue
        if not -90.0 <= theta <= 90.0:
            _warn(warnings, DirectionRangeWarning(sample_path + ".direction", theta))
        keyframes.append(observation)
    return tuple(sorted(keyframes, key=lambda k: k.t))


def _parse_object(data: Any, path: str, default_name: str,
                  warnings: list[DescriptorWarning]) -> ObjectEntry:
    if not isinstance(data, dict):
        raise DescriptorError(path, "expected an object")
    _check_fields(data, _OBJECT_FIELDS, path + ".", warnings)
    description = data.get("description") or ""
    if not isinstance(description, str):
        raise DescriptorError(path + ".description", "expected a text")
    name = data.get("object_name") or default_name
    return ObjectEntry(
        str(name).strip(),
        description.strip(),
        _parse_bool(data.get("is_static", False), path + ".is_static"),
        _parse_keyframes(data.get("key_frames"), path + ".key_frames", warnings),
    )


def _parse_role_object(data: Mapping[str, Any], keys: tuple[str, ...],
                       warnings: list[DescriptorWarning]) -> tuple[Entry, str]:
    """Return the entry of the first present key among ``keys`` and its path.
    Missing, empty and "camera" objects give :py:data:`.camera_entry`."""
    for key in keys:
        if key in data:
            value = data[key]
            break
    else:
        return camera_entry, keys[0]
    if not value:
        return camera_entry, key
    if isinstance(value, str):
        value = {"object_name": value}
    if not isinstance(value, dict):
        raise DescriptorError(key, "expected an object")
    name = str(value.get("object_name") or "").strip().lower()
    if name == "camera" or (not name and not value.get("description")):
        _check_fields(value, _OBJECT_FIELDS, key + ".", warnings)
        return camera_entry, key
    return _parse_object(value, key, key.replace("_", " "), warnings), key


def _parse_data(data: Any) -> tuple[SnapshotDescriptor, list[DescriptorWarning]]:
    if not isinstance(data, dict):
        raise DescriptorError("", "the descriptor must be a JSON object")
    warnings: list[DescriptorWarning] = []
    _check_fields(data, _TOP_LEVEL_FIELDS, "", warnings)
    for name in ("start_time", "end_time", "mode", "sounding_object"):
        if name not in data:
            raise DescriptorError(name, "missing field")
    start = _parse_time(data["start_time"], "start_time")
    end = _parse_time(data["end_time"], "end_time")
    if start >= end:
        raise DescriptorError("end_time", f"the event ends ({end} s) before it starts ({start} s)")
    mode_text = str(data["mode"]).strip().lower()
    try:
        mode = Mode(mode_text)
    except ValueError:
        raise DescriptorError("mode", f"unknown mode {data['mode']!r}") from None
    target = _parse_object(data["sounding_object"], "sounding_object", "sounding object", warnings)
    reference, reference_path = _parse_role_object(data, _REFERENCE_KEYS, warnings)
    facing, facing_path = _parse_role_object(data, _FACING_KEYS, warnings)
    if mode is Mode.ALLOCENTRIC:
        if not reference:
            raise DescriptorError(reference_path, "allocentric mode needs a reference object")
        if not facing:
            raise DescriptorError(facing_path, "allocentric mode needs a facing object")
    event = data.get("event") or ""
    descriptor = SnapshotDescriptor(str(event), (start, end), mode, target, reference, facing)
    return descriptor, warnings


def parse_snapshot(content: str | bytes) -> tuple[SnapshotDescriptor, list[DescriptorWarning]]:
    """Parse a snapshot descriptor in either published schema.

    The open-model schema names ``stand_by_object`` and ``facing_direction``
    without keyframes; the tracking schema names ``reference_object`` and
    ``facing_object`` with ``key_frames``. Text around the JSON object, such as
    a code fence, is ignored. Times are "minutes:seconds" or numbers of
    seconds; distances and directions may carry a unit.

    Return the descriptor and the list of :py:class:`.DescriptorWarning`
    encountered. Raise :py:exc:`.DescriptorError` when the descriptor is unusable."""
    if isinstance(content, bytes):
        content = content.decode("utf-8-sig")
    return _parse_data(_load_json(content))


def read_snapshot(file: str | Path, strict: bool = False) -> tuple[SnapshotDescriptor, list[DescriptorWarning]]:
    """Read and parse a descriptor file.

    With ``strict``, raise :py:exc:`.MalformedDescriptorError` if any warning occurred."""
    with open(file, "rb") as f:
        descriptor, warnings = parse_snapshot(f.read())
    if strict and warnings:
        raise MalformedDescriptorError(warnings)
    return descriptor, warnings


def _entry_dict(entry: Entry) -> dict[str, Any]:
    if not entry:
        return {"object_name": "camera"}
    return {
        "object_name": entry.name,
        "description": entry.description,
        "is_static": entry.is_static,
        "key_frames": {
            format_timestamp(k.t): {"distance": k.r, "direction": k.theta} for k in entry.keyframes
        },
    }


def snapshot_to_dict(descriptor: SnapshotDescriptor) -> dict[str, Any]:
    """Descriptor in the tracking schema, as parsed by :py:func:`.parse_snapshot`."""
    return {
        "event": descriptor.event,
        "start_time": format_timestamp(descriptor.span[0]),
        "end_time": format_timestamp(descriptor.span[1]),
        "mode": descriptor.mode.value,
        "sounding_object": _entry_dict(descriptor.target),
        "reference_object": _entry_dict(descriptor.reference),
        "facing_object": _entry_dict(descriptor.facing) if descriptor.facing else {},
    }


def dump_snapshot(descriptor: SnapshotDescriptor) -> str:
    return json.dumps(snapshot_to_dict(descriptor), indent=4) + "\n"


# Segmentation tracks

@dataclass(frozen=True, slots=True)
class SegConfig:
    """Post-processing of the segmentation tracks."""
    target_threshold: float = 0.5
    """Minimum confidence of the sounding object detections."""
    static_threshold: float = 0.6
    """Minimum confidence of the reference and facing object detections."""
    hfov: Degrees = 90.0
    """Horizontal field of view of the camera."""
    frame_count: int = 128
    """Number of frames sampled from the video."""

    def __post_init__(self) -> None:
        for value in (self.target_threshold, self.static_threshold):
            if not 0 <= value <= 1:
                raise ValueError(f"Confidence threshold out of [0, 1]: {value}")
        if not 0 < self.hfov < 180:
            raise ValueError(f"Invalid field of view: {self.hfov}")
        if self.frame_count < 1:
            raise ValueError(f"Invalid frame count: {self.frame_count}")

    def threshold(self, role: Role) -> float:
        return self.target_threshold if role is Role.TARGET else self.static_threshold


@dataclass(frozen=True, slots=True)
class SegObservation:
    """An object detection in a sampled frame."""
    t: Seconds
    theta: Degrees
    r: Meters
    confidence: float

    def __post_init__(self) -> None:
        if not 0 <= self.confidence <= 1:
            raise ValueError(f"Confidence out of [0, 1]: {self.confidence}")
        object.__setattr__(self, "theta", EgoObservation(self.t, self.theta, self.r).theta)

    @property
    def observation(self) -> EgoObservation:
        return EgoObservation(self.t, self.theta, self.r)


@dataclass(frozen=True, slots=True)
class SegTrack:
    """Observations of one object role, by non-decreasing time."""
    role: Role
    observations: tuple[SegObservation, ...] = ()
    frame_count: int = 128

    def __post_init__(self) -> None:
        times = [o.t for o in self.observations]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("Segmentation observations must be sorted by time")


@dataclass
class SegTrackFormatError(EgofuseError):
    """Raised by :py:func:`.read_seg_tracks` on a malformed line."""
    path: str
    line_number: int
    message: str

    def __str__(self) -> str:
        return f"{self.path}:{self.line_number}: {self.message}"


def centroid_to_observation(cx: float, image_width: float, hfov: Degrees, depth: Meters,
                            t: Seconds) -> EgoObservation:
    """Azimuth of a mask centroid under a pinhole camera model.

    The image edges are at ``±hfov / 2``; the range is the estimated depth."""
    if not 0 <= cx <= image_width or image_width <= 0:
        raise ValueError(f"Centroid {cx} outside an image of width {image_width}")
    if not 0 < hfov < 180:
        raise ValueError(f"Invalid field of view: {hfov}")
    half = image_width / 2
    theta = math.degrees(math.atan((cx - half) / half * math.tan(math.radians(hfov / 2))))
    return EgoObservation(t, theta, depth)


def filter_seg_confidence(observations: Iterable[SegObservation], role: Role,
                          config: SegConfig = SegConfig()) -> list[SegObservation]:
    """Keep the detections at or above the confidence threshold of the role, in order."""
    threshold = config.threshold(role)
    return [o for o in observations if o.confidence >= threshold]


def read_seg_tracks(file: str | Path) -> dict[Role, SegTrack]:
    """Read a segmentation track file, one ``role, t, theta_deg, r_m, confidence``
    line per observation.

    A header line naming the columns is allowed. Lines starting with ``#`` are
    comments, except ``# frame_count: N``. Raise :py:exc:`.SegTrackFormatError`
    on a malformed line."""
    rows: dict[Role, list[SegObservation]] = {}
    frame_count = SegConfig().frame_count
    with open(file, "r", encoding="utf-8", newline="") as f:
        for line_number, row in enumerate(csv.reader(f, skipinitialspace=True), start=1):
            if not row or not "".join(row).strip():
                continue
            if row[0].lstrip().startswith("#"):
                match = re.fullmatch(r"#\s*frame_count\s*:\s*(\d+)\s*", ",".join(row).strip())
                if match:
                    frame_count = int(match.group(1))
                continue
            if row[0].strip() == "role":
                continue
            if len(row) != 5:
                raise SegTrackFormatError(str(file), line_number, f"expected 5 fields, got {len(row)}")
            try:
                role = Role(row[0].strip().lower())
            except ValueError:
                raise SegTrackFormatError(str(file), line_number, f"unknown role {row[0]!r}") from None
            try:
                t, theta, r, confidence = (float(value) for value in row[1:])
                observation = SegObservation(t, theta, r, confidence)
            except ValueError as error:
                raise SegTrackFormatError(str(file), line_number, str(error)) from None
            previous = rows.setdefault(role, [])
            if previous and t < previous[-1].t:
                raise SegTrackFormatError(str(file), line_number, "timestamps must be non-decreasing")
            previous.append(observation)
    return {role: SegTrack(role, tuple(obs), frame_count) for role, obs in rows.items()}


def write_seg_tracks(tracks: Iterable[SegTrack], file: str | Path) -> None:
    """Write the tracks in the format of :py:func:`.read_seg_tracks`."""
    tracks = list(tracks)
    with open(file, "w", encoding="utf-8", newline="") as f:
        if tracks:
            f.write(f"# frame_count: {tracks[0].frame_count}\n")
        f.write("role, t, theta_deg, r_m, confidence\n")
        for track in tracks:
            for o in track.observations:
                f.write(f"{track.role.value}, {o.t!r}, {o.theta!r}, {o.r!r}, {o.confidence!r}\n")


# Audio track

@dataclass(frozen=True, slots=True)
class AudioTrackEntry:
    """Direction, and range once calibrated, of the sound at a time."""
    t: Seconds
    theta: Degrees
    r: Meters | None
    """None when no calibration or no CDR is available."""
    peak_power: float = 0.0
    rms: float = 0.0

    @staticmethod
    def from_estimate(estimate: DoaEstimate, r: Meters | None = None) -> 'AudioTrackEntry':
        return AudioTrackEntry(estimate.t, estimate.phi_hat, r, estimate.peak_power, estimate.rms)

    def observation(self) -> EgoObservation | None:
        if self.r is None:
            return None
        return EgoObservation(self.t, self.theta, self.r)


@dataclass(frozen=True, slots=True)
class AudioFrame:
    """A direction estimate with the CDR of the audio around it."""
    doa: DoaEstimate
    cdr: CdrFrame | None


def estimate_audio_frames(clip: AudioClip, array: MicArray, doa_config: DoaConfig = DoaConfig(),
                          welch_config: WelchConfig = WelchConfig()) -> list[AudioFrame]:
    """Direction estimates of consecutive segments, each with the CDR of a
    ``welch_config.frame`` long window centered on the segment and kept inside the clip.
    Silent segments leave gaps; a CDR that can't be computed is None."""
    frames = []
    frame_length = min(welch_config.frame, clip.duration)
    for start in segment_starts(clip.duration, doa_config.segment, doa_config.hop):
        estimate = srp_phat(clip, (start, doa_config.segment), array, config=doa_config)
        if estimate is None:
            continue
        frame_start = min(max(estimate.t - frame_length / 2, 0.0), clip.duration - frame_length)
        try:
            cdr: CdrFrame | None = estimate_cdr(clip, (frame_start, frame_length), array, welch_config)
        except (UndefinedCdrError, SegmentError) as error:
            logger.debug("No CDR at %.3f s: %s", estimate.t, error)
            cdr = None
        frames.append(AudioFrame(estimate, cdr))
    logger.info("Estimated %d audio frames", len(frames))
    return frames


def calibration_samples(frames: Iterable[AudioFrame], visual: Sequence[EgoObservation],
                        tolerance: Seconds = 0.25) -> list[tuple[Meters, float]]:
    """Pair the CDR of each frame with the visual distance observed closest in
    time, within ``tolerance``. Frames without a visual distance are left out."""
    samples = []
    for frame in frames:
        if frame.cdr is None or not visual:
            continue
        nearest = min(visual, key=lambda o: (abs(o.t - frame.doa.t), o.t))
        if abs(nearest.t - frame.doa.t) <= tolerance:
            samples.append((nearest.r, frame.cdr.cdr))
    return samples


def audio_track_from_frames(frames: Iterable[AudioFrame], calib: RangeCalibration | None = None,
                            forward_band: Degrees = 5.0) -> list[AudioTrackEntry]:
    """Drop the straight-ahead estimates and convert the CDR into distances when calibrated."""
    frames = list(frames)
    kept = {id(estimate) for estimate in discard_forward((f.doa for f in frames), forward_band)}
    entries = []
    for frame in frames:
        if id(frame.doa) not in kept:
            continue
        r = None
        if calib is not None and frame.cdr is not None:
            r = distance_from_cdr(frame.cdr.cdr, calib)
        entries.append(AudioTrackEntry.from_estimate(frame.doa, r))
    return entries


def build_audio_track(clip: AudioClip, array: MicArray, calib: RangeCalibration | None = None,
                      hop: Seconds | None = None, doa_config: DoaConfig = DoaConfig(),
                      welch_config: WelchConfig = WelchConfig(),
                      frames: Sequence[AudioFrame] | None = None) -> list[AudioTrackEntry]:
    """Audio track of the clip: one entry per non-silent segment outside the
    forward band, with a distance when ``calib`` is given.

    Pass the ``frames`` of :py:func:`.estimate_audio_frames` to avoid computing them twice."""
    if hop is not None:
        doa_config = replace(doa_config, hop=hop)
    if frames is None:
        frames = estimate_audio_frames(clip, array, doa_config, welch_config)
    return audio_track_from_frames(frames, calib, doa_config.forward_band)


def write_audio_track(entries: Iterable[AudioTrackEntry], file: str | Path) -> None:
    """Write one ``t, theta_deg, r_m, peak_power, rms`` line per entry; unknown ranges are empty."""
    with open(file, "w", encoding="utf-8", newline="") as f:
        f.write("t, theta_deg, r_m, peak_power, rms\n")
        for e in entries:
            r = "" if e.r is None else repr(e.r)
            f.write(f"{e.t!r}, {e.theta!r}, {r}, {e.peak_power!r}, {e.rms!r}\n")


def read_audio_track(file: str | Path) -> list[AudioTrackEntry]:
    entries = []
    with open(file, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f, skipinitialspace=True):
            r = row["r_m"].strip()
            entries.append(AudioTrackEntry(float(row["t"]), float(row["theta_deg"]),
                                           float(r) if r else None,
                                           float(row["peak_power"]), float(row["rms"])))
    return entries


# Bundle

@dataclass(frozen=True, slots=True)
class TrackBundle:
    """The egocentric tracks gathered for one question."""
    descriptor: SnapshotDescriptor
    seg: dict[Role, SegTrack] = field(default_factory=dict)
    audio: tuple[AudioTrackEntry, ...] = ()

    def __post_init__(self) -> None:
        if self.descriptor.mode is Mode.EGOCENTRIC and set(self.seg) - {Role.TARGET}:
            raise ValueError("An egocentric bundle only tracks the sounding object")


def bundle_to_dict(bundle: TrackBundle) -> dict[str, Any]:
    return {
        "descriptor": snapshot_to_dict(bundle.descriptor),
        "seg": {
            role.value: {
                "frame_count": track.frame_count,
                "observations": [[o.t, o.theta, o.r, o.confidence] for o in track.observations],
            } for role, track in bundle.seg.items()
        },
        "audio": [[e.t, e.theta, e.r, e.peak_power, e.rms] for e in bundle.audio],
    }


def bundle_from_dict(data: Mapping[str, Any]) -> TrackBundle:
    descriptor, _ = _parse_data(data["descriptor"])
    seg = {
        Role(role): SegTrack(Role(role), tuple(SegObservation(*o) for o in track["observations"]),
                             int(track["frame_count"]))
        for role, track in data.get("seg", {}).items()
    }
    audio = tuple(AudioTrackEntry(*entry) for entry in data.get("audio", []))
    return TrackBundle(descriptor, seg, audio)


def dump_bundle(bundle: TrackBundle, file: str | Path) -> None:
    with open(file, "w", encoding="utf-8") as f:
        json.dump(bundle_to_dict(bundle), f, indent=2)
        f.write("\n")


def load_bundle(file: str | Path) -> TrackBundle:
    with open(file, "r", encoding="utf-8") as f:
        return bundle_from_dict(json.load(f))
