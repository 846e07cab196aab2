"""Stage two: aggregation of the egocentric tracks into a global map.

Static objects are located by clustering their projected observations.
The sounding object is tracked by fusing the sources by priority
(segmentation, then descriptor keyframes, then audio), refining with audio
candidates inside a frustum, and smoothing the result with a
constant-velocity Kalman filter followed by a fixed-interval smoother.
"""

from typing import Any, Iterable, Mapping, Protocol
from dataclasses import dataclass
from pathlib import Path
import bisect
import json
import logging
import math

import numpy as np
import numpy.typing as npt
from scipy.linalg import block_diag, inv  # type: ignore[import-untyped]
from sklearn.cluster import DBSCAN  # type: ignore[import-untyped]

from .base import (Degrees, EgofuseError, EgoObservation, GlobalPoint, Meters, Mode, Role, Seconds, Source,
                   wrap_degrees)
from .geometry import (CameraTrajectory, bearing_from, ego_to_global, horizontal_distance, interpolate_pose, point_at,
                       yaw_of)
from .tracks import SegConfig, TrackBundle, filter_seg_confidence

logger = logging.getLogger(__name__)

MAP_FORMAT_VERSION = 1


class FusionError(EgofuseError):
    """Base class of the errors raised by this module."""


class EmptyTrackError(FusionError):
    """No source provides a target position in the time span."""


class ClusterError(FusionError):
    """No positioned point to cluster."""


class ModeViolationError(FusionError):
    """An allocentric map without its reference or facing anchor."""


class EgoReading(Protocol):
    """Anything with an egocentric direction and an optional range."""
    @property
    def t(self) -> Seconds: ...
    @property
    def theta(self) -> Degrees: ...
    @property
    def r(self) -> Meters | None: ...


@dataclass(frozen=True, slots=True)
class Bearing:
    """The egocentric reading behind a track point, with the camera view it was taken from."""
    theta: Degrees
    r: Meters | None
    origin: GlobalPoint
    heading: Degrees


@dataclass(frozen=True, slots=True)
class TrackPoint:
    t: Seconds
    position: GlobalPoint | None
    """None for a direction without range."""
    source: Source
    confidence: float = 1.0
    bearing: Bearing | None = None


@dataclass(frozen=True, slots=True)
class GlobalTrack:
    """Track points sorted by time."""
    points: tuple[TrackPoint, ...] = ()

    def __post_init__(self) -> None:
        times = [p.t for p in self.points]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("Track points must be sorted by time")

    def __len__(self) -> int:
        return len(self.points)

    def positioned(self) -> list[TrackPoint]:
        return [p for p in self.points if p.position is not None]

    def in_span(self, start: Seconds, end: Seconds) -> 'GlobalTrack':
        return GlobalTrack(tuple(p for p in self.points if start <= p.t <= end))

    def position_at(self, t: Seconds) -> GlobalPoint | None:
        """Linear interpolation between the positioned points, clamped at both
        ends. None if no point has a position."""
        points = self.positioned()
        if not points:
            return None
        times = [p.t for p in points]
        index = bisect.bisect_right(times, t)
        if index == 0:
            return points[0].position
        if index == len(points):
            return points[-1].position
        before, after = points[index - 1], points[index]
        assert before.position is not None and after.position is not None
        if after.t == before.t:
            return before.position
        alpha = (t - before.t) / (after.t - before.t)
        return GlobalPoint(before.position.x + alpha * (after.position.x - before.position.x),
                           before.position.y + alpha * (after.position.y - before.position.y))


@dataclass(frozen=True, slots=True)
class StaticAnchor:
    position: GlobalPoint
    support: int
    """Number of points in the selected cluster."""
    source: Source

    def __post_init__(self) -> None:
        if self.support < 1:
            raise ValueError("An anchor is supported by at least one point")


@dataclass(frozen=True, slots=True)
class GateConfig:
    """Spatial consistency test of the descriptor points."""
    radius: Meters = 1.5
    window: Seconds = 2.0
    """Only fused points this close in time are neighbors."""


@dataclass(frozen=True, slots=True)
class FrustumConfig:
    """Region where audio candidates are sampled, around the current estimate."""
    range_margin: Meters = 1.0
    angular_span: Degrees = 45.0
    angular_bins: int = 10
    range_bins: int = 5
    behind_threshold: Degrees = 90.0
    """Audio directions strictly beyond this angle are behind the camera."""

    def __post_init__(self) -> None:
        if self.angular_bins < 1 or self.range_bins < 1:
            raise ValueError("The frustum needs at least one bin per axis")
        if self.range_margin <= 0 or not 0 < self.angular_span <= 360:
            raise ValueError("Invalid frustum size")

    @property
    def angular_width(self) -> Degrees:
        return self.angular_span / self.angular_bins

    @property
    def range_width(self) -> Meters:
        return 2.0 * self.range_margin / self.range_bins


@dataclass(frozen=True, slots=True)
class KalmanConfig:
    process_noise: float = 1.0
    """Spectral density of the acceleration noise, in m²/s³."""
    measurement_noise: float = 0.25
    """Variance of a position measurement per axis, in m²."""
    period: Seconds = 0.1
    """Sampling period of the smoothed track."""

    def __post_init__(self) -> None:
        if self.process_noise <= 0 or self.measurement_noise <= 0 or self.period <= 0:
            raise ValueError("Kalman noises and period must be positive")


@dataclass(frozen=True, slots=True)
class FusionConfig:
    sources: frozenset[Source] = frozenset({Source.SD, Source.SEG, Source.AUDIO})
    """Sources used for a moving target."""
    context: Seconds = 1.0
    """Observations this far outside the event span still feed the smoother."""
    cover_tolerance: Seconds = 0.25
    """An audio time this close to a segmentation or descriptor point is covered."""
    cluster_eps: Meters = 1.0
    cluster_min_pts: int = 2
    gate: GateConfig = GateConfig()
    frustum: FrustumConfig = FrustumConfig()
    kalman: KalmanConfig = KalmanConfig()
    seg: SegConfig = SegConfig()

    def __post_init__(self) -> None:
        unknown = set(self.sources) - {Source.SD, Source.SEG, Source.AUDIO}
        if unknown or not self.sources:
            raise ValueError(f"Invalid fusion sources: {sorted(s.value for s in self.sources)}")
        if self.context < 0 or self.cover_tolerance < 0:
            raise ValueError("Context and cover tolerance can't be negative")


@dataclass(frozen=True, slots=True)
class GlobalMap:
    """Everything needed to answer a question about an event."""
    target: GlobalTrack
    """Smoothed target track over the span."""
    span: tuple[Seconds, Seconds]
    mode: Mode
    reference: StaticAnchor | None = None
    facing: StaticAnchor | None = None
    fused: GlobalTrack = GlobalTrack()
    """Target track before smoothing."""
    audio_energy: tuple[tuple[Seconds, float], ...] = ()
    """RMS level of the audio segments, by time."""

    def __post_init__(self) -> None:
        if self.mode is Mode.ALLOCENTRIC and (self.reference is None or self.facing is None):
            raise ModeViolationError("An allocentric map needs both anchors")


def _confidence(reading: EgoReading) -> float:
    return float(getattr(reading, "confidence", 1.0))


def globalize(readings: Iterable[EgoReading], traj: CameraTrajectory, source: Source) -> GlobalTrack:
    """Project egocentric readings on the world plane with the camera pose at
    their time. Readings without range keep their bearing but no position."""
    points = []
    for reading in sorted(readings, key=lambda reading: reading.t):
        pose = interpolate_pose(traj, reading.t)
        heading = yaw_of(pose, traj.frame_config)
        position = None
        if reading.r is not None:
            position = ego_to_global(EgoObservation(reading.t, reading.theta, reading.r), pose, traj.frame_config)
        bearing = Bearing(wrap_degrees(reading.theta), reading.r, pose.location, heading)
        points.append(TrackPoint(reading.t, position, source, _confidence(reading), bearing))
    return GlobalTrack(tuple(points))


def cluster_static(points: Iterable[TrackPoint], eps: Meters = 1.0, min_pts: int = 2) -> StaticAnchor:
    """Locate a static object from projected observations with DBSCAN.

    The largest cluster wins, the one whose first point is the earliest on a
    tie, and the anchor is its centroid. When every point is noise, the most
    confident point is used. Raise :py:exc:`.ClusterError` without positioned points."""
    positioned = sorted((p for p in points if p.position is not None),
                        key=lambda p: (p.t, p.position.x, p.position.y))  # type: ignore[union-attr]
    if not positioned:
        raise ClusterError("No positioned point to cluster")
    source = positioned[0].source
    coordinates = np.array([(p.position.x, p.position.y) for p in positioned])  # type: ignore[union-attr]
    labels = DBSCAN(eps=eps, min_samples=min_pts).fit(coordinates).labels_
    clusters = [np.flatnonzero(labels == label) for label in sorted(set(labels) - {-1})]
    if not clusters:
        best = max(positioned, key=lambda p: (p.confidence, -p.t))
        assert best.position is not None
        logger.debug("Every point is noise, falling back to the most confident one")
        return StaticAnchor(best.position, 1, source)
    members = min(clusters, key=lambda indices: (-len(indices), positioned[int(indices[0])].t))
    x, y = coordinates[members].mean(axis=0)
    return StaticAnchor(GlobalPoint(float(x), float(y)), len(members), source)


def _nearest(fused: Mapping[Seconds, TrackPoint], t: Seconds, window: Seconds) -> TrackPoint | None:
    best: TrackPoint | None = None
    for point in fused.values():
        if point.position is None or abs(point.t - t) > window:
            continue
        if best is None or (abs(point.t - t), point.t) < (abs(best.t - t), best.t):
            best = point
    return best


def _frustum_candidates(theta_c: Degrees, r_c: Meters, frustum: FrustumConfig) -> list[tuple[Degrees, Meters]]:
    thetas = [theta_c - frustum.angular_span / 2 + (i + 0.5) * frustum.angular_width
              for i in range(frustum.angular_bins)]
    ranges = [r_c - frustum.range_margin + (j + 0.5) * frustum.range_width for j in range(frustum.range_bins)]
    return [(theta, r) for theta in thetas for r in ranges if r > 0]


def _refine(bearing: Bearing, theta_c: Degrees, r_c: Meters, frustum: FrustumConfig) -> GlobalPoint | None:
    """Frustum candidate closest to the audio reading, in bin widths."""
    candidates = _frustum_candidates(theta_c, r_c, frustum)
    if not candidates:
        return None

    def cost(candidate: tuple[Degrees, Meters]) -> tuple[float, float, float, float]:
        theta, r = candidate
        value = (wrap_degrees(theta - bearing.theta) / frustum.angular_width) ** 2
        if bearing.r is not None:
            value += ((r - bearing.r) / frustum.range_width) ** 2
        return (value, abs(r - r_c), theta, r)

    theta, r = min(candidates, key=cost)
    return point_at(bearing.origin, bearing.heading, theta, r)


def fuse_dynamic(seg: GlobalTrack, sd: GlobalTrack, audio: GlobalTrack, span: tuple[Seconds, Seconds],
                 frustum: FrustumConfig = FrustumConfig(), gate: GateConfig = GateConfig(),
                 cover_tolerance: Seconds = 0.25) -> GlobalTrack:
    """Fuse the projected target tracks by source priority.

    Every segmentation point of the span is kept, the most confident one when
    several share a time. The descriptor and audio points are then swept by
    time, descriptor first on equal times:

    * a descriptor point at a time without segmentation point is admitted when
      it lies within ``gate.radius`` of the temporally nearest fused point in
      ``gate.window``, or when there is no such neighbor;
    * an audio point is used when it is behind the camera or when no
      segmentation or admitted descriptor point lies within ``cover_tolerance``.
      The point kept is the frustum candidate closest to the audio reading,
      the frustum being centered on the nearest fused point, or on the audio
      reading itself without neighbor. An audio direction outside the frustum
      re-centers it on the reading when behind the camera and is rejected
      otherwise. Audio replaces a descriptor point of the same time only
      when behind the camera, and never replaces a segmentation point.

    Raise :py:exc:`.EmptyTrackError` if nothing is left."""
    start, end = span
    fused: dict[Seconds, TrackPoint] = {}
    for point in seg.in_span(start, end).positioned():
        current = fused.get(point.t)
        if current is None or point.confidence > current.confidence:
            fused[point.t] = point
    seg_times = sorted(fused)
    sd_times: list[Seconds] = []

    events = [(p.t, 0, index, p) for index, p in enumerate(sd.in_span(start, end).positioned())]
    events += [(p.t, 1, index, p) for index, p in enumerate(audio.in_span(start, end).points) if p.bearing]
    events.sort(key=lambda event: event[:3])

    for t, kind, _, point in events:
        if kind == 0:
            if t in fused:
                continue
            neighbor = _nearest(fused, t, gate.window)
            if neighbor is not None:
                assert neighbor.position is not None and point.position is not None
                if horizontal_distance(neighbor.position, point.position) > gate.radius:
                    logger.debug("Descriptor point at %.3f s fails the consistency gate", t)
                    continue
            fused[t] = point
            bisect.insort(sd_times, t)
            continue

        bearing = point.bearing
        assert bearing is not None
        if t in fused and fused[t].source is Source.SEG:
            continue
        covered = any(abs(other - t) <= cover_tolerance for other in seg_times + sd_times)
        behind = abs(bearing.theta) > frustum.behind_threshold
        if covered and not behind:
            continue
        neighbor = _nearest(fused, t, gate.window)
        if neighbor is not None:
            assert neighbor.position is not None
            theta_c, r_c = bearing_from(bearing.origin, bearing.heading, neighbor.position)
        elif bearing.r is not None:
            theta_c, r_c = bearing.theta, bearing.r
        else:
            continue
        if abs(wrap_degrees(bearing.theta - theta_c)) > frustum.angular_span / 2:
            if not behind:
                logger.debug("Audio point at %.3f s outside the frustum", t)
                continue
            theta_c, r_c = bearing.theta, bearing.r if bearing.r is not None else r_c
        position = _refine(bearing, theta_c, r_c, frustum)
        if position is None:
            continue
        existing = fused.get(t)
        if existing is not None and not (behind and existing.source is Source.SD):
            continue
        if existing is not None:
            sd_times.remove(t)
        fused[t] = TrackPoint(t, position, Source.AUDIO, point.confidence, bearing)

    if not fused:
        raise EmptyTrackError(f"No target point between {start} s and {end} s")
    return GlobalTrack(tuple(fused[t] for t in sorted(fused)))


def _transition(dt: float, q: float) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    f = np.array([[1.0, dt], [0.0, 1.0]])
    noise = q * np.array([[dt ** 3 / 3, dt ** 2 / 2], [dt ** 2 / 2, dt]])
    return block_diag(f, f), block_diag(noise, noise)


def kalman_smooth(track: GlobalTrack, config: KalmanConfig, span: tuple[Seconds, Seconds]) -> GlobalTrack:
    """Constant-velocity Kalman filter with Rauch-Tung-Striebel smoothing,
    sampled every ``config.period`` from the span start.

    The state starts at the first measurement with zero velocity. A single
    measurement gives a constant track. Raise :py:exc:`.EmptyTrackError`
    without positioned points."""
    measurements = track.positioned()
    if not measurements:
        raise EmptyTrackError("Nothing to smooth")
    start, end = span
    count = int(math.floor((end - start) / config.period + 1e-9)) + 1
    grid = [start + k * config.period for k in range(count)]
    timeline = sorted(set(grid) | {p.t for p in measurements})
    by_time: dict[Seconds, list[GlobalPoint]] = {}
    for p in measurements:
        assert p.position is not None
        by_time.setdefault(p.t, []).append(p.position)

    h = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    r = config.measurement_noise * np.eye(2)
    first = measurements[0].position
    assert first is not None
    x = np.array([first.x, 0.0, first.y, 0.0])
    p = np.diag([1e4, 1e4, 1e4, 1e4])
    predicted_states, predicted_covariances = [], []
    filtered_states, filtered_covariances, transitions = [], [], []
    previous = timeline[0]
    for t in timeline:
        f, q = _transition(t - previous, config.process_noise)
        x = f @ x
        p = f @ p @ f.T + q
        predicted_states.append(x)
        predicted_covariances.append(p)
        transitions.append(f)
        for z in by_time.get(t, []):
            innovation = np.array([z.x, z.y]) - h @ x
            s = h @ p @ h.T + r
            gain = p @ h.T @ inv(s)
            x = x + gain @ innovation
            p = (np.eye(4) - gain @ h) @ p
        filtered_states.append(x)
        filtered_covariances.append(p)
        previous = t

    smoothed = list(filtered_states)
    for k in range(len(timeline) - 2, -1, -1):
        f = transitions[k + 1]
        c = filtered_covariances[k] @ f.T @ inv(predicted_covariances[k + 1])
        smoothed[k] = filtered_states[k] + c @ (smoothed[k + 1] - predicted_states[k + 1])

    index = {t: k for k, t in enumerate(timeline)}
    points = tuple(
        TrackPoint(t, GlobalPoint(float(smoothed[index[t]][0]), float(smoothed[index[t]][2])), Source.SMOOTHED)
        for t in grid)
    return GlobalTrack(points)


def _constant_track(position: GlobalPoint, span: tuple[Seconds, Seconds], period: Seconds,
                    source: Source) -> GlobalTrack:
    start, end = span
    count = int(math.floor((end - start) / period + 1e-9)) + 1
    return GlobalTrack(tuple(TrackPoint(start + k * period, position, source) for k in range(count)))


def _static_anchor(bundle: TrackBundle, role: Role, traj: CameraTrajectory,
                   config: FusionConfig) -> StaticAnchor | None:
    """Cluster the descriptor keyframes of the object, or its segmentation
    observations when the descriptor has none."""
    entry = bundle.descriptor.entry(role)
    if entry and entry.keyframes:
        return cluster_static(globalize(entry.keyframes, traj, Source.SD).points,
                              config.cluster_eps, config.cluster_min_pts)
    track = bundle.seg.get(role)
    if track is not None:
        observations = filter_seg_confidence(track.observations, role, config.seg)
        if observations:
            return cluster_static(globalize(observations, traj, Source.SEG).points,
                                  config.cluster_eps, config.cluster_min_pts)
    return None


def build_global_map(bundle: TrackBundle, traj: CameraTrajectory, config: FusionConfig = FusionConfig()) -> GlobalMap:
    """Build the map of a question: anchors for an allocentric question and
    the target track over the event span.

    Raise :py:exc:`.ModeViolationError` if an allocentric anchor can't be
    located and :py:exc:`.EmptyTrackError` if the target can't."""
    descriptor = bundle.descriptor
    span = descriptor.span
    reference = facing = None
    if descriptor.mode is Mode.ALLOCENTRIC:
        reference = _static_anchor(bundle, Role.REFERENCE, traj, config)
        facing = _static_anchor(bundle, Role.FACING, traj, config)
        if reference is None or facing is None:
            missing = "reference" if reference is None else "facing"
            raise ModeViolationError(f"The {missing} object can't be located")
        logger.info("Anchors at (%.2f, %.2f) and (%.2f, %.2f)", reference.position.x, reference.position.y,
                    facing.position.x, facing.position.y)

    window = (max(0.0, span[0] - config.context), span[1] + config.context)
    energy = tuple((e.t, e.rms) for e in bundle.audio if window[0] <= e.t <= window[1])

    if descriptor.target.is_static:
        anchor = _static_anchor(bundle, Role.TARGET, traj, config)
        if anchor is None:
            raise EmptyTrackError("The static sounding object can't be located")
        target = _constant_track(anchor.position, span, config.kalman.period, anchor.source)
        return GlobalMap(target, span, descriptor.mode, reference, facing, target, energy)

    sources = config.sources
    seg_track = GlobalTrack()
    if Source.SEG in sources and Role.TARGET in bundle.seg:
        observations = filter_seg_confidence(bundle.seg[Role.TARGET].observations, Role.TARGET, config.seg)
        seg_track = globalize(observations, traj, Source.SEG)
    sd_track = globalize(descriptor.target.keyframes, traj, Source.SD) if Source.SD in sources else GlobalTrack()
    audio_track = globalize(bundle.audio, traj, Source.AUDIO) if Source.AUDIO in sources else GlobalTrack()
    fused = fuse_dynamic(seg_track, sd_track, audio_track, window, config.frustum, config.gate,
                         config.cover_tolerance)
    logger.info("Fused %d target points from %d seg, %d descriptor and %d audio points",
                len(fused), len(seg_track), len(sd_track), len(audio_track))
    target = kalman_smooth(fused, config.kalman, span)
    return GlobalMap(target, span, descriptor.mode, reference, facing, fused, energy)


def _point_dict(point: TrackPoint) -> dict[str, Any]:
    return {
        "t": point.t,
        "x": None if point.position is None else point.position.x,
        "y": None if point.position is None else point.position.y,
        "source": point.source.value,
        "confidence": point.confidence,
    }


def _anchor_dict(anchor: StaticAnchor | None) -> dict[str, Any] | None:
    if anchor is None:
        return None
    return {"x": anchor.position.x, "y": anchor.position.y, "support": anchor.support,
            "source": anchor.source.value}


def map_to_dict(global_map: GlobalMap) -> dict[str, Any]:
    return {
        "format_version": MAP_FORMAT_VERSION,
        "mode": global_map.mode.value,
        "span": list(global_map.span),
        "reference": _anchor_dict(global_map.reference),
        "facing": _anchor_dict(global_map.facing),
        "target": [_point_dict(p) for p in global_map.target.points],
        "fused": [_point_dict(p) for p in global_map.fused.points],
        "audio_energy": [list(e) for e in global_map.audio_energy],
    }


def _load_point(data: Mapping[str, Any]) -> TrackPoint:
    position = None if data["x"] is None else GlobalPoint(float(data["x"]), float(data["y"]))
    return TrackPoint(float(data["t"]), position, Source(data["source"]), float(data["confidence"]))


def _load_anchor(data: Mapping[str, Any] | None) -> StaticAnchor | None:
    if data is None:
        return None
    return StaticAnchor(GlobalPoint(float(data["x"]), float(data["y"])), int(data["support"]), Source(data["source"]))


def map_from_dict(data: Mapping[str, Any]) -> GlobalMap:
    if data.get("format_version") != MAP_FORMAT_VERSION:
        raise ValueError(f"Unsupported map format version: {data.get('format_version')!r}")
    start, end = data["span"]
    return GlobalMap(
        GlobalTrack(tuple(_load_point(p) for p in data["target"])),
        (float(start), float(end)),
        Mode(data["mode"]),
        _load_anchor(data["reference"]),
        _load_anchor(data["facing"]),
        GlobalTrack(tuple(_load_point(p) for p in data.get("fused", []))),
        tuple((float(t), float(rms)) for t, rms in data.get("audio_energy", [])),
    )


def dump_map(global_map: GlobalMap, file: str | Path) -> None:
    with open(file, "w", encoding="utf-8") as f:
        json.dump(map_to_dict(global_map), f, indent=2)
        f.write("\n")


def load_map(file: str | Path) -> GlobalMap:
    with open(file, "r", encoding="utf-8") as f:
        return map_from_dict(json.load(f))
