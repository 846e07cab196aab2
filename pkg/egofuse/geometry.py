"""Coordinate conventions and transforms between the egocentric, global and
allocentric frames.

The world frame is right-handed with ``z`` up; all reasoning happens in the
horizontal ``(x, y)`` plane. Headings and bearings use the same convention
as egocentric azimuths: ``0`` along world ``+y``, positive towards ``+x``.
So a camera facing ``+x`` has a heading of ``90``.

Camera trajectory files hold one pose per line: ``t, x, y, z, qw, qx, qy, qz``.
"""

from typing import Iterable, Literal, TypeAlias
from dataclasses import dataclass, field
from pathlib import Path
import csv
import logging
import math

import numpy as np
import numpy.typing as npt
from scipy.spatial.transform import Rotation, Slerp

from .base import Degrees, EgofuseError, EgoObservation, GlobalPoint, Meters, Seconds, wrap_degrees

logger = logging.getLogger(__name__)

Vector3: TypeAlias = tuple[float, float, float]
"""A 3-vector, in meters for positions."""
Quaternion: TypeAlias = tuple[float, float, float, float]
"""A rotation as a unit quaternion in ``(w, x, y, z)`` order."""

_VERTICAL_TOLERANCE = math.sin(math.radians(1.0))


class GeometryError(EgofuseError):
    """Base class of the errors raised by this module."""


class DegenerateHeadingError(GeometryError):
    """The device forward axis is within 1° of vertical, so it has no heading."""


class DegenerateFrameError(GeometryError):
    """The reference and facing points of an allocentric frame coincide."""


class ZeroRangeError(GeometryError):
    """The point is at the camera position, its direction is undefined."""


class EmptyTrajectoryError(GeometryError):
    """A pose was requested from a trajectory without poses."""


@dataclass
class TrajectoryFormatError(GeometryError):
    """Raised by :py:func:`.read_trajectory` on a malformed line."""
    path: str
    line_number: int
    message: str

    def __str__(self) -> str:
        return f"{self.path}:{self.line_number}: {self.message}"


def _unit(vector: Iterable[float], name: str) -> npt.NDArray[np.float64]:
    array = np.asarray(tuple(vector), dtype=np.float64)
    norm = float(np.linalg.norm(array))
    if array.shape != (3,) or not math.isfinite(norm) or norm < 1e-12:
        raise ValueError(f"Invalid {name} axis: {vector}")
    return array / norm


@dataclass(frozen=True, slots=True)
class FrameConfig:
    """Designation of the device axes, expressed in the device frame.

    The defaults match the Aria glasses mic coordinates: ``x`` is the lateral
    axis, positive on the right, and the rear temple mics sit at negative ``z``,
    so the device looks along ``+z``."""
    forward_axis: Vector3 = (0.0, 0.0, 1.0)
    """Direction the camera looks at."""
    right_axis: Vector3 = (1.0, 0.0, 0.0)
    """Direction of the wearer's right, orthogonal to the forward axis."""

    def __post_init__(self) -> None:
        forward = _unit(self.forward_axis, "forward")
        right = _unit(self.right_axis, "right")
        if abs(float(forward @ right)) > 1e-9:
            raise ValueError("The forward and right axes must be orthogonal")
        object.__setattr__(self, "forward_axis", tuple(float(v) for v in forward))
        object.__setattr__(self, "right_axis", tuple(float(v) for v in right))


@dataclass(frozen=True, slots=True)
class CameraPose:
    """Position and orientation of the device at a time."""
    t: Seconds
    position: Vector3
    """Device position in the world frame; only ``x`` and ``y`` are used."""
    orientation: Quaternion = (1.0, 0.0, 0.0, 0.0)
    """Rotation from the device frame to the world frame."""

    def __post_init__(self) -> None:
        norm = math.sqrt(sum(q * q for q in self.orientation))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"Orientation isn't a unit quaternion (norm {norm})")

    @property
    def location(self) -> GlobalPoint:
        """Horizontal position of the camera."""
        return GlobalPoint(self.position[0], self.position[1])

    def rotation(self) -> Rotation:
        """The orientation as a scipy rotation."""
        w, x, y, z = self.orientation
        return Rotation.from_quat([x, y, z, w])


def _quaternion_of(rotation: Rotation) -> Quaternion:
    x, y, z, w = (float(v) for v in rotation.as_quat())
    return (w, x, y, z)


@dataclass(frozen=True, slots=True)
class CameraTrajectory:
    """Time-sorted camera poses, usually sampled at 1 kHz."""
    poses: tuple[CameraPose, ...]
    frame_config: FrameConfig = FrameConfig()
    times: npt.NDArray[np.float64] = field(init=False, repr=False, compare=False)
    """Pose timestamps, as an array for fast lookups."""

    def __post_init__(self) -> None:
        times = np.array([pose.t for pose in self.poses], dtype=np.float64)
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("Trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return len(self.poses)


@dataclass(frozen=True, slots=True)
class AlloFrame:
    """A frame anchored at a reference object, with +y towards a facing object."""
    reference: GlobalPoint
    facing: GlobalPoint

    def __post_init__(self) -> None:
        if horizontal_distance(self.reference, self.facing) <= 1e-9:
            raise DegenerateFrameError("Reference and facing objects coincide")


def yaw_of(pose: CameraPose, frame_config: FrameConfig = FrameConfig()) -> Degrees:
    """Return the world heading of the device forward axis projected on the
    horizontal plane.

    Raise :py:exc:`.DegenerateHeadingError` if the forward axis is within 1°
    of vertical."""
    forward = pose.rotation().apply(np.asarray(frame_config.forward_axis))
    horizontal = math.hypot(forward[0], forward[1])
    if horizontal < _VERTICAL_TOLERANCE:
        raise DegenerateHeadingError(f"Forward axis is vertical at t={pose.t}")
    return wrap_degrees(math.degrees(math.atan2(forward[0], forward[1])))


def pose_from_heading(t: Seconds, position: Vector3, heading: Degrees,
                      frame_config: FrameConfig = FrameConfig()) -> CameraPose:
    """Build a level pose looking towards ``heading``.

    The device forward axis is mapped to the horizontal heading direction and
    the device right axis to the horizontal right of it."""
    psi = math.radians(heading)
    forward_world = np.array([math.sin(psi), math.cos(psi), 0.0])
    right_world = np.array([math.cos(psi), -math.sin(psi), 0.0])
    forward_device = np.asarray(frame_config.forward_axis)
    right_device = np.asarray(frame_config.right_axis)
    world = np.column_stack([forward_world, right_world, np.cross(forward_world, right_world)])
    device = np.column_stack([forward_device, right_device, np.cross(forward_device, right_device)])
    rotation = Rotation.from_matrix(world @ device.T)
    return CameraPose(t, position, _quaternion_of(rotation))


def ego_to_global(obs: EgoObservation, pose: CameraPose,
                  frame_config: FrameConfig = FrameConfig()) -> GlobalPoint:
    """Project an egocentric observation to the world plane:
    ``p = L + r (cos θ f + sin θ r)`` with ``f`` the camera heading and ``r``
    its right."""
    bearing = math.radians(yaw_of(pose, frame_config) + obs.theta)
    return GlobalPoint(pose.position[0] + obs.r * math.sin(bearing),
                       pose.position[1] + obs.r * math.cos(bearing))


def global_to_ego(point: GlobalPoint, pose: CameraPose,
                  frame_config: FrameConfig = FrameConfig()) -> EgoObservation:
    """Inverse of :py:func:`.ego_to_global`; the observation time is the pose time.

    Raise :py:exc:`.ZeroRangeError` if the point is at the camera position."""
    dx = point.x - pose.position[0]
    dy = point.y - pose.position[1]
    r = math.hypot(dx, dy)
    if r < 1e-12:
        raise ZeroRangeError(f"Point at the camera position at t={pose.t}")
    bearing = math.degrees(math.atan2(dx, dy))
    return EgoObservation(pose.t, bearing - yaw_of(pose, frame_config), r)


def bearing_from(origin: GlobalPoint, heading: Degrees, point: GlobalPoint) -> tuple[Degrees, Meters]:
    """Azimuth and range of ``point`` seen from ``origin`` looking at ``heading``.

    Unlike :py:func:`.global_to_ego`, a point at the origin is allowed and
    gets an azimuth of 0."""
    dx = point.x - origin.x
    dy = point.y - origin.y
    return wrap_degrees(math.degrees(math.atan2(dx, dy)) - heading), math.hypot(dx, dy)


def point_at(origin: GlobalPoint, heading: Degrees, theta: Degrees, r: Meters) -> GlobalPoint:
    """Point at azimuth ``theta`` and range ``r`` from ``origin`` looking at ``heading``."""
    bearing = math.radians(heading + theta)
    return GlobalPoint(origin.x + r * math.sin(bearing), origin.y + r * math.cos(bearing))


def allocentric_observation(target: GlobalPoint, frame: AlloFrame) -> tuple[Degrees, Meters]:
    """Return the azimuth and range of the target in the allocentric frame.

    The frame origin is the reference object and its +y axis points to the
    facing object; azimuths use the egocentric convention (positive on the
    +x side)."""
    facing_bearing, _ = bearing_from(frame.reference, 0.0, frame.facing)
    theta, _ = bearing_from(frame.reference, facing_bearing, target)
    return theta, horizontal_distance(target, frame.reference)


SimpleLabel: TypeAlias = Literal["left", "right", "back"]
QuadrantLabel: TypeAlias = Literal["front-left", "front-right", "back-left", "back-right"]


def quantize_simple(theta: Degrees) -> SimpleLabel:
    """Label of the three-option direction questions.

    "left" for ``[-120, 0)``, "right" for ``[0, 120)``, "back" otherwise."""
    theta = wrap_degrees(theta)
    if -120.0 <= theta < 0.0:
        return "left"
    if 0.0 <= theta < 120.0:
        return "right"
    return "back"


def quantize_quadrant(theta: Degrees) -> QuadrantLabel:
    """Label of the four-option direction questions, one per quadrant.

    Each quadrant is half-open, e.g. front-right is ``[0, 90)``."""
    theta = wrap_degrees(theta)
    if theta < -90.0:
        return "back-left"
    if theta < 0.0:
        return "front-left"
    if theta < 90.0:
        return "front-right"
    return "back-right"


def horizontal_distance(a: GlobalPoint, b: GlobalPoint) -> Meters:
    """Euclidean distance in the horizontal plane."""
    return math.hypot(a.x - b.x, a.y - b.y)


def interpolate_pose(traj: CameraTrajectory, t: Seconds) -> CameraPose:
    """Return the pose at ``t``.

    Positions are interpolated linearly and orientations along the shortest
    arc. Times outside the trajectory clamp to the nearest endpoint.
    Raise :py:exc:`.EmptyTrajectoryError` if the trajectory has no pose."""
    if len(traj.poses) == 0:
        raise EmptyTrajectoryError("Cannot interpolate an empty trajectory")
    index = int(np.searchsorted(traj.times, t, side="right")) - 1
    if index < 0:
        return traj.poses[0]
    if index >= len(traj.poses) - 1 or traj.poses[index].t == t:
        return traj.poses[index]
    before, after = traj.poses[index], traj.poses[index + 1]
    alpha = (t - before.t) / (after.t - before.t)
    position = tuple(float(a + alpha * (b - a)) for a, b in zip(before.position, after.position))
    rotations = Rotation.concatenate([before.rotation(), after.rotation()])
    orientation = Slerp([0.0, 1.0], rotations)([alpha])[0]
    x, y, z = position
    return CameraPose(t, (x, y, z), _quaternion_of(orientation))


def read_trajectory(file: str | Path, frame_config: FrameConfig = FrameConfig()) -> CameraTrajectory:
    """Read a camera trajectory file.

    Blank lines and lines starting with ``#`` are skipped. Quaternions are
    renormalized when their norm is within 1e-3 of one.
    Raise :py:exc:`.TrajectoryFormatError` on a malformed line."""
    poses: list[CameraPose] = []
    with open(file, "r", encoding="utf-8", newline="") as f:
        for line_number, row in enumerate(csv.reader(f), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 8:
                raise TrajectoryFormatError(str(file), line_number, f"expected 8 fields, got {len(row)}")
            try:
                t, x, y, z, qw, qx, qy, qz = (float(value) for value in row)
            except ValueError:
                raise TrajectoryFormatError(str(file), line_number, "non-numeric field") from None
            norm = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
            if abs(norm - 1.0) > 1e-3:
                raise TrajectoryFormatError(str(file), line_number, f"quaternion norm {norm}")
            if poses and t <= poses[-1].t:
                raise TrajectoryFormatError(str(file), line_number, "timestamps must be strictly increasing")
            poses.append(CameraPose(t, (x, y, z), (qw / norm, qx / norm, qy / norm, qz / norm)))
    logger.info("Read %d poses from %s", len(poses), file)
    return CameraTrajectory(tuple(poses), frame_config)


def write_trajectory(traj: CameraTrajectory, file: str | Path) -> None:
    """Write a camera trajectory file readable by :py:func:`.read_trajectory`."""
    with open(file, "w", encoding="utf-8", newline="") as f:
        f.write("# t, x, y, z, qw, qx, qy, qz\n")
        for pose in traj.poses:
            f.write(", ".join(repr(float(v)) for v in (pose.t, *pose.position, *pose.orientation)) + "\n")
