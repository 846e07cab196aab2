"""Synthetic scenes with known geometry, used as ground truth.

A scenario describes a camera wearer, a sounding object and the objects of
the allocentric questions, all moving along waypoints in the horizontal
plane. From it are generated the multi-channel audio (free field plus
channel-independent diffuse noise), the camera trajectory, descriptor and
segmentation fixtures, and the questions with answers computed from the true
positions.
"""

from typing import Any, Mapping
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
import logging
import math

import numpy as np
import numpy.typing as npt
import yaml
from scipy.signal import get_window  # type: ignore[import-untyped]

from .audio_doa import AudioClip, MicArray, aria_array, write_audio, write_mic_array
from .base import EgofuseError, EgoObservation, GlobalPoint, Mode, ObjectEntry, Role, Seconds, Source, camera_entry
from .fusion import GlobalMap, GlobalTrack, StaticAnchor, TrackPoint, dump_map
from .geometry import CameraTrajectory, pose_from_heading, write_trajectory
from .helpers import parse_timestamp
from .qa import Answer, Question, QuestionKind, default_options, render_question, resolve, write_answers, write_questions
from .tracks import SegObservation, SegTrack, SnapshotDescriptor, dump_snapshot, write_seg_tracks

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

_CHUNK = 1 << 15


class ScenarioError(EgofuseError):
    """Invalid scenario description."""


class SourceInsideArrayError(EgofuseError):
    """The source is within the microphone array."""


def fractional_delay(signal: FloatArray, delays: FloatArray, taps: int = 32) -> FloatArray:
    """Return ``y[n] = x(n - delays[n])`` with a Hann-windowed sinc
    interpolator of ``taps`` coefficients. Samples before the start are zero."""
    signal = np.asarray(signal, dtype=np.float64)
    delays = np.broadcast_to(np.asarray(delays, dtype=np.float64), signal.shape)
    half = taps // 2
    offsets = np.arange(-half + 1, half + 1)
    window = get_window("hann", 2 * half + 1, fftbins=False)
    output = np.empty_like(signal)
    for first in range(0, len(signal), _CHUNK):
        index = np.arange(first, min(first + _CHUNK, len(signal)))
        position = index - delays[index]
        base = np.floor(position).astype(np.int64)
        fraction = position - base
        distance = offsets[np.newaxis, :] - fraction[:, np.newaxis]
        weights = np.sinc(distance) * np.interp(distance, np.arange(-half, half + 1), window)
        taps_index = base[:, np.newaxis] + offsets[np.newaxis, :]
        valid = (taps_index >= 0) & (taps_index < len(signal))
        samples = np.where(valid, signal[np.clip(taps_index, 0, len(signal) - 1)], 0.0)
        output[index] = np.sum(samples * weights, axis=1)
    return output


def simulate_source(array: MicArray, positions: FloatArray, signal: FloatArray, sample_rate: int,
                    diffuse_snr: float | None = None, seed: int = 0) -> AudioClip:
    """Free-field recording of a point source.

    ``positions`` is the source position in the device frame, either one
    3-vector or one per sample. Each microphone receives the signal delayed
    by the propagation time and scaled by ``1 / max(distance, 0.1)``. With
    ``diffuse_snr`` in dB, independent noise is added to every channel at
    that level below the signal as heard 1 m away.
    Raise :py:exc:`.SourceInsideArrayError` if the source enters the sphere
    enclosing the microphones."""
    signal = np.asarray(signal, dtype=np.float64)
    positions = np.broadcast_to(np.asarray(positions, dtype=np.float64), (len(signal), 3))
    mics = array.matrix()
    center = mics.mean(axis=0)
    radius = float(np.max(np.linalg.norm(mics - center, axis=1)))
    if float(np.min(np.linalg.norm(positions - center, axis=1))) <= radius:
        raise SourceInsideArrayError("The source is inside the microphone array")
    channels = np.empty((array.count, len(signal)))
    for m, mic in enumerate(mics):
        distance = np.linalg.norm(positions - mic, axis=1)
        delayed = fractional_delay(signal, distance / array.c * sample_rate)
        channels[m] = delayed / np.maximum(distance, 0.1)
    if diffuse_snr is not None:
        rng = np.random.default_rng(seed)
        level = float(np.sqrt(np.mean(signal ** 2))) * 10.0 ** (-diffuse_snr / 20.0)
        channels += level * rng.standard_normal(channels.shape)
    return AudioClip(sample_rate, channels)


@dataclass(frozen=True, slots=True)
class SceneObject:
    """An object moving along waypoints, or standing still with a single one."""
    name: str
    description: str
    waypoints: tuple[tuple[float, float, float], ...]
    """``(t, x, y)``, or ``(t, bearing, range)`` around ``center``."""
    center: GlobalPoint | None = None
    is_static: bool = True

    def __post_init__(self) -> None:
        times = [w[0] for w in self.waypoints]
        if not times or any(b <= a for a, b in zip(times, times[1:])):
            raise ScenarioError(f"{self.name}: waypoint times must be strictly increasing")

    def positions(self, times: FloatArray) -> tuple[FloatArray, FloatArray]:
        """World coordinates at the given times, clamped to the waypoint range."""
        t, a, b = (np.array(column, dtype=np.float64) for column in zip(*self.waypoints))
        first = np.interp(times, t, a)
        second = np.interp(times, t, b)
        if self.center is None:
            return first, second
        bearing = np.radians(first)
        return self.center.x + second * np.sin(bearing), self.center.y + second * np.cos(bearing)

    def position_at(self, t: Seconds) -> GlobalPoint:
        x, y = self.positions(np.array([t]))
        return GlobalPoint(float(x[0]), float(y[0]))


@dataclass(frozen=True, slots=True)
class CameraPath:
    waypoints: tuple[tuple[float, float, float, float], ...]
    """``(t, x, y, heading)``; headings are interpolated without wrapping."""
    rate: float = 1000.0
    """Pose rate of the generated trajectory, in Hz."""

    def state(self, times: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        t, x, y, heading = (np.array(column, dtype=np.float64) for column in zip(*self.waypoints))
        return np.interp(times, t, x), np.interp(times, t, y), np.interp(times, t, heading)


@dataclass(frozen=True, slots=True)
class SegSetup:
    hfov: float = 90.0
    frame_count: int = 128
    confidence: float = 0.9
    dropout: float = 0.0
    """Probability of missing a visible object in a frame."""


@dataclass(frozen=True, slots=True)
class DescriptorSetup:
    keyframe_period: Seconds = 2.0
    direction_noise: float = 0.0
    """Standard deviation of the keyframe directions, in degrees."""
    distance_noise: float = 0.0
    """Standard deviation of the keyframe distances, in meters."""


@dataclass(frozen=True, slots=True)
class ScenarioQuestion:
    id: str
    kind: QuestionKind
    span: tuple[Seconds, Seconds]
    metadata: dict[str, str] = field(default_factory=dict)
    """Template values: ``sound_event`` or ``speech_topic``."""


@dataclass(frozen=True, slots=True)
class Scenario:
    name: str
    duration: Seconds
    sample_rate: int
    camera: CameraPath
    target: SceneObject
    reference: SceneObject | None = None
    facing: SceneObject | None = None
    seed: int = 0
    snr_db: float | None = 20.0
    mics: str = "all"
    """Name of the Aria microphone subset."""
    seg: SegSetup = SegSetup()
    descriptor: DescriptorSetup = DescriptorSetup()
    questions: tuple[ScenarioQuestion, ...] = ()
    config: dict[str, Any] = field(default_factory=dict)
    """Pipeline settings matching the scene, written to the fixture."""

    def __post_init__(self) -> None:
        if self.duration <= 0 or self.sample_rate <= 0:
            raise ScenarioError("Duration and sample rate must be positive")
        for item in self.questions:
            if item.kind.mode is Mode.ALLOCENTRIC and (self.reference is None or self.facing is None):
                raise ScenarioError(f"Question {item.id} needs a reference and a facing object")
            if not 0 <= item.span[0] < item.span[1] <= self.duration:
                raise ScenarioError(f"Question {item.id}: span {item.span} outside the scene")


def _object(data: Mapping[str, Any], is_static: bool) -> SceneObject:
    center = data.get("center")
    if "position" in data:
        x, y = data["position"]
        waypoints: tuple[tuple[float, float, float], ...] = ((0.0, float(x), float(y)),)
    else:
        waypoints = tuple((float(t), float(a), float(b)) for t, a, b in data["waypoints"])
    return SceneObject(str(data["name"]), str(data.get("description", "")), waypoints,
                       GlobalPoint(float(center[0]), float(center[1])) if center is not None else None,
                       bool(data.get("is_static", is_static)))


def scenario_from_dict(data: Mapping[str, Any]) -> Scenario:
    """Build a scenario from its YAML structure. Raise :py:exc:`.ScenarioError` if invalid."""
    try:
        camera = data["camera"]
        questions = tuple(
            ScenarioQuestion(str(q["id"]), QuestionKind(q["kind"]),
                         (parse_timestamp(q["span"][0]), parse_timestamp(q["span"][1])),
                         {key: str(q[key]) for key in ("sound_event", "speech_topic") if key in q})
            for q in data.get("questions", []))
        return Scenario(
            name=str(data["name"]),
            duration=float(data["duration"]),
            sample_rate=int(data["sample_rate"]),
            camera=CameraPath(tuple((float(t), float(x), float(y), float(h)) for t, x, y, h in camera["waypoints"]),
                              float(camera.get("rate", 1000.0))),
            target=_object(data["target"], False),
            reference=_object(data["reference"], True) if data.get("reference") else None,
            facing=_object(data["facing"], True) if data.get("facing") else None,
            seed=int(data.get("seed", 0)),
            snr_db=None if data.get("snr_db") is None else float(data["snr_db"]),
            mics=str(data.get("mics", "all")),
            seg=SegSetup(**data.get("seg", {})),
            descriptor=DescriptorSetup(**data.get("descriptor", {})),
            questions=questions,
            config=dict(data.get("config") or {}),
        )
    except (KeyError, TypeError, ValueError) as error:
        raise ScenarioError(f"Invalid scenario: {error}") from None


def load_scenario(file: str | Path) -> Scenario:
    with open(file, "r", encoding="utf-8") as f:
        return scenario_from_dict(yaml.safe_load(f))


def bundled_scenario(name: str = "moving_speaker") -> Scenario:
    """A scenario shipped with the package."""
    resource = resources.files("egofuse.resources").joinpath(f"{name}.yaml")
    if not resource.is_file():
        raise ScenarioError(f"No bundled scenario named {name!r}")
    return scenario_from_dict(yaml.safe_load(resource.read_text(encoding="utf-8")))


def ego_truth(scenario: Scenario, obj: SceneObject, times: FloatArray) -> tuple[FloatArray, FloatArray]:
    """True egocentric azimuths and ranges of the object at the given times."""
    cx, cy, heading = scenario.camera.state(times)
    x, y = obj.positions(times)
    bearing = np.degrees(np.arctan2(x - cx, y - cy))
    theta = (bearing - heading + 180.0) % 360.0 - 180.0
    return theta, np.hypot(x - cx, y - cy)


def camera_trajectory(scenario: Scenario, array: MicArray) -> CameraTrajectory:
    count = int(math.floor(scenario.duration * scenario.camera.rate + 1e-9)) + 1
    times = np.arange(count) / scenario.camera.rate
    x, y, heading = scenario.camera.state(times)
    return CameraTrajectory(
        tuple(pose_from_heading(float(t), (float(px), float(py), 0.0), float(h), array.axes)
              for t, px, py, h in zip(times, x, y, heading)),
        array.axes)


def _visible(theta: FloatArray, hfov: float) -> npt.NDArray[np.bool_]:
    return np.abs(theta) < hfov / 2


@dataclass(frozen=True, slots=True, eq=False)
class Walkthrough:
    """Every artifact generated from a scenario."""
    scenario: Scenario
    array: MicArray
    clip: AudioClip
    trajectory: CameraTrajectory
    questions: tuple[Question, ...]
    answers: tuple[Answer, ...]
    descriptors: dict[str, SnapshotDescriptor]
    seg: dict[str, tuple[SegTrack, ...]]
    truth_track: tuple[EgoObservation, ...]
    """True egocentric target positions every 0.25 s, at segment centers."""
    maps: dict[str, GlobalMap]


def _keyframes(scenario: Scenario, obj: SceneObject, rng: np.random.Generator) -> tuple[EgoObservation, ...]:
    setup = scenario.descriptor
    count = int(math.floor(scenario.duration / setup.keyframe_period + 1e-9)) + 1
    times = np.arange(count) * setup.keyframe_period
    theta, r = ego_truth(scenario, obj, times)
    keyframes = []
    for t, angle, distance in zip(times, theta, r):
        if not _visible(np.array([angle]), scenario.seg.hfov)[0]:
            continue
        angle += setup.direction_noise * rng.standard_normal() if setup.direction_noise else 0.0
        distance += setup.distance_noise * rng.standard_normal() if setup.distance_noise else 0.0
        keyframes.append(EgoObservation(float(t), float(angle), max(float(distance), 0.05)))
    return tuple(keyframes)


def _seg_track(scenario: Scenario, obj: SceneObject, role: Role, rng: np.random.Generator) -> SegTrack:
    setup = scenario.seg
    times = np.arange(setup.frame_count) * (scenario.duration / setup.frame_count)
    theta, r = ego_truth(scenario, obj, times)
    observations = []
    for t, angle, distance in zip(times, theta, r):
        missed = setup.dropout > 0 and rng.random() < setup.dropout
        if _visible(np.array([angle]), setup.hfov)[0] and not missed:
            observations.append(SegObservation(float(t), float(angle), float(distance), setup.confidence))
    return SegTrack(role, tuple(observations), setup.frame_count)


def _entry(obj: SceneObject, keyframes: tuple[EgoObservation, ...]) -> ObjectEntry:
    return ObjectEntry(obj.name, obj.description, obj.is_static, keyframes)


def _truth_map(scenario: Scenario, item: ScenarioQuestion, period: Seconds = 0.1) -> GlobalMap:
    start, end = item.span
    count = int(math.floor((end - start) / period + 1e-9)) + 1
    times = start + period * np.arange(count)
    x, y = scenario.target.positions(times)
    target = GlobalTrack(tuple(TrackPoint(float(t), GlobalPoint(float(px), float(py)), Source.SMOOTHED)
                               for t, px, py in zip(times, x, y)))
    reference = facing = None
    if item.kind.mode is Mode.ALLOCENTRIC:
        assert scenario.reference is not None and scenario.facing is not None
        reference = StaticAnchor(scenario.reference.position_at(start), 1, Source.SD)
        facing = StaticAnchor(scenario.facing.position_at(start), 1, Source.SD)
    return GlobalMap(target, item.span, item.kind.mode, reference, facing, target)


def simulate_walkthrough(scenario: Scenario) -> Walkthrough:
    """Generate the recording, the fixtures and the ground truth of a scenario.
    The output only depends on the scenario, its seed included."""
    rng = np.random.default_rng(scenario.seed)
    array = aria_array(scenario.mics)
    length = int(round(scenario.duration * scenario.sample_rate))
    times = np.arange(length) / scenario.sample_rate
    signal = rng.standard_normal(length)
    theta, r = ego_truth(scenario, scenario.target, times)
    radians = np.radians(theta)[:, np.newaxis]
    positions = r[:, np.newaxis] * (np.cos(radians) * np.asarray(array.axes.forward_axis)
                                    + np.sin(radians) * np.asarray(array.axes.right_axis))
    clip = simulate_source(array, positions, signal, scenario.sample_rate, scenario.snr_db,
                           int(rng.integers(2 ** 31)))
    logger.info("Simulated %.1f s of %d-channel audio", scenario.duration, array.count)
    trajectory = camera_trajectory(scenario, array)

    target_keyframes = _keyframes(scenario, scenario.target, rng)
    target_seg = _seg_track(scenario, scenario.target, Role.TARGET, rng)
    static = {}
    for role, obj in ((Role.REFERENCE, scenario.reference), (Role.FACING, scenario.facing)):
        if obj is not None:
            static[role] = (obj, _keyframes(scenario, obj, rng), _seg_track(scenario, obj, role, rng))

    questions, answers, descriptors, seg, maps = [], [], {}, {}, {}
    for item in scenario.questions:
        metadata = dict(item.metadata)
        allocentric = item.kind.mode is Mode.ALLOCENTRIC
        if allocentric:
            metadata["reference"] = static[Role.REFERENCE][0].name
            metadata["facing"] = static[Role.FACING][0].name
        question = Question(
            item.id, item.kind, metadata.get("speech_topic") or metadata.get("sound_event", ""), item.span,
            default_options(item.kind), metadata.get("reference"), metadata.get("facing"),
            render_question(item.kind, metadata))
        questions.append(question)
        descriptors[item.id] = SnapshotDescriptor(
            question.event, item.span, item.kind.mode, _entry(scenario.target, target_keyframes),
            _entry(*static[Role.REFERENCE][:2]) if allocentric else camera_entry,
            _entry(*static[Role.FACING][:2]) if allocentric else camera_entry)
        tracks = [target_seg]
        if allocentric:
            tracks += [static[Role.REFERENCE][2], static[Role.FACING][2]]
        seg[item.id] = tuple(tracks)
        maps[item.id] = _truth_map(scenario, item)
        answers.append(resolve(maps[item.id], question, trajectory))

    centers = np.arange(0.125, scenario.duration, 0.25)
    theta_c, r_c = ego_truth(scenario, scenario.target, centers)
    truth_track = tuple(EgoObservation(float(t), float(a), float(d)) for t, a, d in zip(centers, theta_c, r_c))
    return Walkthrough(scenario, array, clip, trajectory, tuple(questions), tuple(answers), descriptors, seg,
                       truth_track, maps)


def write_fixture(walkthrough: Walkthrough, directory: str | Path) -> Path:
    """Write the walkthrough as a fixture directory and return its path::

        audio.wav  trajectory.csv  mics.yaml  config.yaml
        questions.jsonl  answers_gt.jsonl
        descriptors/<id>.json  seg/<id>.csv
        gt/doa.csv  gt/maps/<id>.json
    """
    root = Path(directory)
    for sub in ("descriptors", "seg", "gt/maps"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_audio(walkthrough.clip, root / "audio.wav")
    write_trajectory(walkthrough.trajectory, root / "trajectory.csv")
    write_mic_array(walkthrough.array, root / "mics.yaml")
    with open(root / "config.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(walkthrough.scenario.config, f, sort_keys=True)
    write_questions(walkthrough.questions, root / "questions.jsonl")
    write_answers(walkthrough.answers, root / "answers_gt.jsonl")
    for qid, descriptor in walkthrough.descriptors.items():
        (root / "descriptors" / f"{qid}.json").write_text(dump_snapshot(descriptor), encoding="utf-8")
    for qid, tracks in walkthrough.seg.items():
        write_seg_tracks(tracks, root / "seg" / f"{qid}.csv")
    for qid, global_map in walkthrough.maps.items():
        dump_map(global_map, root / "gt" / "maps" / f"{qid}.json")
    with open(root / "gt" / "doa.csv", "w", encoding="utf-8") as f:
        f.write("t,phi_deg,r_m\n")
        for sample in walkthrough.truth_track:
            f.write(f"{sample.t!r},{sample.theta!r},{sample.r!r}\n")
    logger.info("Wrote fixture %s", root)
    return root
