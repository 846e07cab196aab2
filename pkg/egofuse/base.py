"""Classes and types shared by every stage of the pipeline.

Angles follow a single convention across the package: degrees in
``[-180, 180)``, ``0`` straight ahead, negative to the left, positive to
the right. Positions live in the world horizontal plane ``(x, y)``.
"""

from typing import TypeAlias
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
import math

Seconds: TypeAlias = float
"""A timestamp or a duration, in seconds from the start of the recording."""
Degrees: TypeAlias = float
"""An azimuth in degrees. Bearings are normalized into ``[-180, 180)``."""
Meters: TypeAlias = float
"""A distance or a coordinate in meters."""


class EgofuseError(Exception):
    """Root of the domain errors raised by the package.

    The command line interface reports any of them with exit status 1."""


def wrap_degrees(theta: Degrees) -> Degrees:
    """Normalize an angle into ``[-180, 180)``; ``180`` maps to ``-180``."""
    wrapped = (theta + 180.0) % 360.0 - 180.0
    if wrapped >= 180.0:
        wrapped -= 360.0
    return wrapped


class Role(Enum):
    """The part an object plays in a question."""
    TARGET = "target"
    """The sounding object whose location is asked."""
    REFERENCE = "reference"
    """The object the listener stands by, origin of the allocentric frame."""
    FACING = "facing"
    """The object the listener faces, giving the allocentric +y direction."""


class Source(Enum):
    """Which estimator produced a track point."""
    SD = "sd"
    """Keyframes of the snapshot descriptor."""
    SEG = "seg"
    """Text-guided segmentation tracks."""
    AUDIO = "audio"
    """Spatial audio direction and range estimates."""
    SMOOTHED = "smoothed"
    """Output of the trajectory smoother."""


class Mode(Enum):
    """The point of view a question is asked from."""
    EGOCENTRIC = "egocentric"
    """Relative to the camera wearer."""
    ALLOCENTRIC = "allocentric"
    """Relative to a reference object facing another object."""


@dataclass(frozen=True, slots=True)
class EgoObservation:
    """One egocentric sample of an object: when, in which direction, how far."""
    t: Seconds
    """Time of the sample, non-negative."""
    theta: Degrees
    """Azimuth from the camera forward axis. Normalized on construction."""
    r: Meters
    """Horizontal range to the object, strictly positive."""

    def __post_init__(self) -> None:
        if not (math.isfinite(self.t) and math.isfinite(self.theta) and math.isfinite(self.r)):
            raise ValueError(f"Non-finite observation: {self.t}, {self.theta}, {self.r}")
        if self.t < 0:
            raise ValueError(f"Negative observation time: {self.t}")
        if self.r <= 0:
            raise ValueError(f"Observation range must be positive, got {self.r}")
        object.__setattr__(self, "theta", wrap_degrees(self.theta))


@dataclass(frozen=True, slots=True)
class GlobalPoint:
    """A location in the world horizontal plane."""
    x: Meters
    y: Meters

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Non-finite point: ({self.x}, {self.y})")


class Entry(ABC):
    """Abstract base class for the objects named by a snapshot descriptor.

    Implementations are :py:class:`.ObjectEntry` for an actual object and
    :py:class:`.CameraEntry` standing for the camera wearer, when the
    descriptor sets the reference object "to camera".
    """
    @abstractmethod
    def __bool__(self) -> bool:
        """True if it is an :py:class:`.ObjectEntry`,
        False if it is the :py:class:`.CameraEntry`."""

    @property
    @abstractmethod
    def name(self) -> str:
        """Short object name, e.g. "table"."""

    @property
    @abstractmethod
    def description(self) -> str:
        """Free-text description used to segment the object."""

    @property
    @abstractmethod
    def is_static(self) -> bool:
        """True if the object generally doesn't move."""

    @property
    @abstractmethod
    def keyframes(self) -> tuple[EgoObservation, ...]:
        """Sparse egocentric observations, sorted by time."""


@dataclass(frozen=True, slots=True)
class ObjectEntry(Entry):
    """An object identified by the snapshot descriptor."""
    name: str
    description: str
    is_static: bool = False
    keyframes: tuple[EgoObservation, ...] = ()

    def __bool__(self) -> bool:
        return True


class CameraEntry(Entry):
    """Stand-in for the camera wearer.

    Used when a descriptor has no reference or facing object, which is the
    normal case for egocentric questions. It is falsy, so the idiom
    ``if descriptor.reference:`` tells whether an object was named.
    Use the :py:data:`.camera_entry` instance rather than creating new ones."""

    def __bool__(self) -> bool:
        return False

    @property
    def name(self) -> str:
        return "camera"

    @property
    def description(self) -> str:
        return ""

    @property
    def is_static(self) -> bool:
        return False

    @property
    def keyframes(self) -> tuple[EgoObservation, ...]:
        return ()

    def __repr__(self) -> str:
        return "<egofuse.base.CameraEntry>"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CameraEntry)

    def __hash__(self) -> int:
        return hash(CameraEntry)


camera_entry = CameraEntry()
"""Singleton returned wherever a descriptor names the camera itself."""
