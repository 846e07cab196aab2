"""Direction of arrival from multi-channel audio.

Pairwise GCC-PHAT correlations are summed at the lags implied by each
candidate azimuth (SRP-PHAT) and the azimuth with the largest steered power
wins. Azimuths follow the package convention: 0 forward, positive right.

A positive lag of :py:func:`gcc_phat` means the second signal lags the first.
"""

from typing import Iterable, Literal, Sequence
from dataclasses import dataclass
from pathlib import Path
import csv
import itertools
import logging
import math

import numpy as np
import numpy.typing as npt
import soundfile  # type: ignore[import-untyped]
import yaml

from .base import Degrees, EgofuseError, Seconds
from .geometry import FrameConfig, Vector3

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

ARIA_POSITIONS: tuple[Vector3, ...] = (
    (0.05, -0.04, 0.0),
    (-0.005, 0.0, 0.0),
    (-0.05, -0.04, 0.0),
    (-0.07, 0.0, 0.0),
    (0.07, 0.0, 0.0),
    (-0.07, 0.0, -0.10),
    (0.07, 0.0, -0.10),
)
"""Positions of the seven Aria glasses microphones in the device frame, in meters."""

MIC_SUBSETS: dict[str, tuple[int, ...]] = {
    "02": (0, 2),
    "34": (3, 4),
    "56": (5, 6),
    "0234": (0, 2, 3, 4),
    "0256": (0, 2, 5, 6),
    "3456": (3, 4, 5, 6),
    "all": (0, 1, 2, 3, 4, 5, 6),
}
"""Named subsets of the Aria microphones. Subsets without the rear temple
mics (5 and 6) cannot tell front from back."""


class ArrayError(EgofuseError):
    """The microphone geometry doesn't match the audio or is invalid."""


class SegmentError(EgofuseError):
    """The requested segment isn't inside the clip."""


@dataclass(frozen=True, slots=True)
class MicArray:
    """Microphone positions in the device frame."""
    positions: tuple[Vector3, ...]
    axes: FrameConfig = FrameConfig()
    """Forward and right axes spanning the azimuth plane."""
    c: float = 343.0
    """Speed of sound in m/s."""

    def __post_init__(self) -> None:
        if len(self.positions) < 2:
            raise ArrayError("An array needs at least two microphones")
        if self.c <= 0:
            raise ArrayError(f"Invalid speed of sound: {self.c}")
        array = np.asarray(self.positions, dtype=np.float64)
        if array.shape != (len(self.positions), 3) or not np.all(np.isfinite(array)):
            raise ArrayError("Microphone positions must be finite 3-vectors")
        for m, n in self.pairs():
            if np.linalg.norm(array[m] - array[n]) < 1e-9:
                raise ArrayError(f"Microphones {m} and {n} share the same position")

    @property
    def count(self) -> int:
        return len(self.positions)

    def matrix(self) -> FloatArray:
        """Positions as an ``(M, 3)`` array."""
        return np.asarray(self.positions, dtype=np.float64)

    def pairs(self) -> list[tuple[int, int]]:
        """All microphone pairs ``(m, n)`` with ``m < n``."""
        return list(itertools.combinations(range(len(self.positions)), 2))

    def direction(self, phi: Degrees | FloatArray) -> FloatArray:
        """Unit vector(s) of azimuth ``phi`` in the device frame, shape ``(..., 3)``."""
        radians = np.radians(np.asarray(phi, dtype=np.float64))[..., np.newaxis]
        forward = np.asarray(self.axes.forward_axis)
        right = np.asarray(self.axes.right_axis)
        result: FloatArray = np.cos(radians) * forward + np.sin(radians) * right
        return result

    def spacing(self, m: int, n: int) -> float:
        """Distance between two microphones, in meters."""
        return float(np.linalg.norm(self.matrix()[m] - self.matrix()[n]))

    def subset(self, indices: Iterable[int]) -> 'MicArray':
        """The array restricted to the given microphones, in the given order."""
        return MicArray(tuple(self.positions[i] for i in indices), self.axes, self.c)


def aria_array(subset: str = "all", c: float = 343.0, axes: FrameConfig = FrameConfig()) -> MicArray:
    """The Aria glasses array, or one of its :py:data:`.MIC_SUBSETS`."""
    if subset not in MIC_SUBSETS:
        raise ArrayError(f"Unknown mic subset {subset!r}, expected one of {', '.join(MIC_SUBSETS)}")
    return MicArray(ARIA_POSITIONS, axes, c).subset(MIC_SUBSETS[subset])


def read_mic_array(file: str | Path) -> MicArray:
    """Read the array geometry from a YAML file with the keys ``positions``
    (list of ``[x, y, z]``), and optionally ``forward_axis``, ``right_axis``
    and ``speed_of_sound``."""
    with open(file, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict) or "positions" not in data:
        raise ArrayError(f"{file}: missing 'positions'")
    try:
        positions = tuple((float(x), float(y), float(z)) for x, y, z in data["positions"])
        axes = FrameConfig(tuple(data.get("forward_axis", (0.0, 0.0, 1.0))),
                           tuple(data.get("right_axis", (1.0, 0.0, 0.0))))
    except (TypeError, ValueError) as error:
        raise ArrayError(f"{file}: {error}") from None
    return MicArray(positions, axes, float(data.get("speed_of_sound", 343.0)))


def write_mic_array(array: MicArray, file: str | Path) -> None:
    """Write the array geometry in the format of :py:func:`.read_mic_array`."""
    data = {
        "positions": [list(p) for p in array.positions],
        "forward_axis": list(array.axes.forward_axis),
        "right_axis": list(array.axes.right_axis),
        "speed_of_sound": array.c,
    }
    with open(file, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=False)


@dataclass(frozen=True, slots=True, eq=False)
class AudioClip:
    """Synchronized multi-channel samples."""
    sample_rate: int
    channels: FloatArray
    """Samples of shape ``(channel count, length)``."""

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise ValueError(f"Invalid sample rate: {self.sample_rate}")
        channels = np.asarray(self.channels, dtype=np.float64)
        if channels.ndim != 2:
            raise ValueError("Channels must be a 2-D array (channels, samples)")
        object.__setattr__(self, "channels", channels)

    @property
    def channel_count(self) -> int:
        return int(self.channels.shape[0])

    @property
    def length(self) -> int:
        return int(self.channels.shape[1])

    @property
    def duration(self) -> Seconds:
        return self.length / self.sample_rate

    def samples(self, start: Seconds, duration: Seconds) -> FloatArray:
        """Samples of a segment. Raise :py:exc:`.SegmentError` if it leaves the clip."""
        first = int(round(start * self.sample_rate))
        count = int(round(duration * self.sample_rate))
        if first < 0 or count <= 0 or first + count > self.length:
            raise SegmentError(f"Segment ({start}, {duration}) outside a clip of {self.duration} s")
        return self.channels[:, first:first + count]

    def subset(self, indices: Iterable[int]) -> 'AudioClip':
        """The clip restricted to the given channels."""
        return AudioClip(self.sample_rate, self.channels[list(indices)])


def read_audio(file: str | Path) -> AudioClip:
    """Read an uncompressed multi-channel waveform file."""
    data, sample_rate = soundfile.read(str(file), dtype="float64", always_2d=True)
    logger.info("Read %d channels of %d samples at %d Hz from %s",
                data.shape[1], data.shape[0], sample_rate, file)
    return AudioClip(int(sample_rate), np.ascontiguousarray(data.T))


def write_audio(clip: AudioClip, file: str | Path) -> None:
    """Write the clip as 64-bit float WAV, which keeps every sample exact."""
    soundfile.write(str(file), clip.channels.T, clip.sample_rate, subtype="DOUBLE", format="WAV")


@dataclass(frozen=True, slots=True)
class DoaGrid:
    """Candidate azimuths, from ``start`` included to ``stop`` excluded."""
    start: Degrees = -180.0
    stop: Degrees = 180.0
    step: Degrees = 1.0

    def __post_init__(self) -> None:
        span = self.stop - self.start
        if self.step <= 0 or span <= 0:
            raise ValueError("The grid needs a positive step and span")
        count = round(span / self.step)
        if abs(count * self.step - span) > 1e-9:
            raise ValueError(f"Step {self.step} doesn't divide the span {span}")

    def angles(self) -> FloatArray:
        count = round((self.stop - self.start) / self.step)
        result: FloatArray = self.start + self.step * np.arange(count, dtype=np.float64)
        return result


@dataclass(frozen=True, slots=True)
class DoaConfig:
    """Settings of the direction estimation."""
    segment: Seconds = 0.25
    """Length of the analysed segments."""
    hop: Seconds = 0.25
    """Time between the starts of two consecutive segments."""
    grid: DoaGrid = DoaGrid()
    upsample: int = 4
    """Lags are searched at ``upsample`` times the sample rate; 1 gives integer sample lags."""
    window: Literal["rectangular", "hann"] = "rectangular"
    rms_floor: float = 1e-6
    """Segments quieter than this produce no estimate."""
    phat_floor: float = 1e-12
    """Spectral magnitudes are floored at this fraction of their maximum."""
    forward_band: Degrees = 5.0
    """Estimates within ``±forward_band`` are dropped by :py:func:`.discard_forward`."""

    def __post_init__(self) -> None:
        if self.segment <= 0 or self.hop <= 0:
            raise ValueError("Segment length and hop must be positive")
        if self.upsample < 1:
            raise ValueError("Upsampling factor must be at least 1")
        if self.window not in ("rectangular", "hann"):
            raise ValueError(f"Unknown window {self.window!r}")


@dataclass(frozen=True, slots=True, eq=False)
class Correlation:
    """Correlation values for the lags ``-max_lag`` to ``max_lag``."""
    values: FloatArray
    max_lag: int
    low_energy: bool = False
    """True when a channel was silent; the values are then all zero."""

    def at(self, lag: int | npt.NDArray[np.int64]) -> FloatArray:
        return np.asarray(self.values[np.asarray(lag) + self.max_lag], dtype=np.float64)

    def peak_lag(self) -> int:
        return int(np.argmax(self.values)) - self.max_lag


@dataclass(frozen=True, slots=True, eq=False)
class DoaEstimate:
    """Direction estimated on one segment."""
    t: Seconds
    """Center of the segment."""
    phi_hat: Degrees
    power: FloatArray
    """Steered power over the grid angles."""
    grid: DoaGrid
    peak_power: float
    rms: float
    """Energy of the segment, across all channels."""


def _fft_size(length: int) -> int:
    return 1 << (2 * length - 1).bit_length()


def _phat(cross: npt.NDArray[np.complex128], floor: float) -> npt.NDArray[np.complex128]:
    magnitude = np.abs(cross)
    guard = floor * float(magnitude.max())
    if guard <= 0:
        guard = np.finfo(np.float64).tiny
    result: npt.NDArray[np.complex128] = cross / np.maximum(magnitude, guard)
    return result


def _correlation(spectrum_x: npt.NDArray[np.complex128], spectrum_y: npt.NDArray[np.complex128],
                 fft_size: int, max_lag: int, upsample: int, floor: float) -> FloatArray:
    weighted = _phat(np.conj(spectrum_x) * spectrum_y, floor)
    full = np.fft.irfft(weighted, fft_size * upsample) * upsample
    result: FloatArray = np.concatenate((full[-max_lag:], full[:max_lag + 1])) if max_lag else full[:1]
    return result


def gcc_phat(x: FloatArray, y: FloatArray, max_lag: int, upsample: int = 1,
             floor: float = 1e-12) -> Correlation:
    """Generalized cross-correlation with phase transform.

    ``max_lag`` is counted at the upsampled rate. Identical signals give a
    peak of about 1 at lag 0. A silent channel gives a result flagged
    ``low_energy``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("Segments must be 1-D and of equal length")
    if not 0 <= max_lag < len(x) * upsample:
        raise ValueError(f"max_lag {max_lag} out of range for {len(x)} samples")
    if not np.any(x) or not np.any(y):
        return Correlation(np.zeros(2 * max_lag + 1), max_lag, low_energy=True)
    size = _fft_size(len(x))
    values = _correlation(np.fft.rfft(x, size), np.fft.rfft(y, size), size, max_lag, upsample, floor)
    return Correlation(values, max_lag)


def expected_lag(pair: tuple[int, int], phi: Degrees, array: MicArray, sample_rate: float) -> int:
    """Lag at which :py:func:`.gcc_phat` of the pair peaks for a far-field
    source at azimuth ``phi``: ``round((p_m - p_n) . u(phi) / c * fs)``."""
    m, n = pair
    difference = array.matrix()[m] - array.matrix()[n]
    return int(np.rint(float(difference @ array.direction(phi)) / array.c * sample_rate))


def lag_table(array: MicArray, angles: FloatArray, sample_rate: float) -> npt.NDArray[np.int64]:
    """:py:func:`.expected_lag` for every pair and angle, shape ``(pairs, angles)``."""
    positions = array.matrix()
    differences = np.array([positions[m] - positions[n] for m, n in array.pairs()])
    delays = differences @ array.direction(angles).T / array.c
    return np.rint(delays * sample_rate).astype(np.int64)


def srp_phat(clip: AudioClip, segment: tuple[Seconds, Seconds], array: MicArray,
             grid: DoaGrid | None = None, config: DoaConfig = DoaConfig()) -> DoaEstimate | None:
    """Steered response power over the grid for the segment ``(start, duration)``.

    The estimate is the first maximum, so the smallest angle wins ties.
    Return None when the segment is below the energy floor."""
    if clip.channel_count != array.count:
        raise ArrayError(f"{clip.channel_count} channels for {array.count} microphones")
    grid = config.grid if grid is None else grid
    start, duration = segment
    samples = clip.samples(start, duration)
    rms = float(np.sqrt(np.mean(samples ** 2)))
    if rms < config.rms_floor:
        logger.debug("Segment at %.3f s below the energy floor", start)
        return None
    if config.window == "hann":
        samples = samples * np.hanning(samples.shape[1])
    angles = grid.angles()
    lags = lag_table(array, angles, clip.sample_rate * config.upsample)
    max_lag = int(np.abs(lags).max())
    size = _fft_size(samples.shape[1])
    spectra = np.fft.rfft(samples, size, axis=1)
    power = np.zeros(len(angles))
    for index, (m, n) in enumerate(array.pairs()):
        if not np.any(samples[m]) or not np.any(samples[n]):
            continue
        values = _correlation(spectra[m], spectra[n], size, max_lag, config.upsample, config.phat_floor)
        power += values[lags[index] + max_lag]
    best = int(np.argmax(power))
    return DoaEstimate(start + duration / 2, float(angles[best]), power, grid, float(power[best]), rms)


def discard_forward(estimates: Iterable[DoaEstimate], band: Degrees = 5.0) -> list[DoaEstimate]:
    """Drop the estimates within ``[-band, band]``, bounds included.
    Straight-ahead peaks are mostly the wearer's own voice."""
    return [estimate for estimate in estimates if not -band <= estimate.phi_hat <= band]


def segment_starts(duration: Seconds, segment: Seconds, hop: Seconds) -> list[Seconds]:
    """Start times of the segments fully inside a clip of ``duration`` seconds."""
    count = int(math.floor((duration - segment) / hop + 1e-9)) + 1
    return [k * hop for k in range(max(count, 0))]


def estimate_doa_track(clip: AudioClip, array: MicArray, config: DoaConfig = DoaConfig()) -> list[DoaEstimate]:
    """Run :py:func:`.srp_phat` on consecutive segments; silent ones leave gaps."""
    estimates = []
    for start in segment_starts(clip.duration, config.segment, config.hop):
        estimate = srp_phat(clip, (start, config.segment), array, config=config)
        if estimate is not None:
            estimates.append(estimate)
    logger.info("Estimated %d directions from %.2f s of audio", len(estimates), clip.duration)
    return estimates


def write_doa_track(estimates: Sequence[DoaEstimate], file: str | Path) -> None:
    """Write one ``t, phi_deg, peak_power, rms`` line per estimate."""
    with open(file, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t", "phi_deg", "peak_power", "rms"])
        for estimate in estimates:
            writer.writerow([repr(estimate.t), repr(estimate.phi_hat),
                             repr(estimate.peak_power), repr(estimate.rms)])


def read_doa_track(file: str | Path) -> list[tuple[Seconds, Degrees]]:
    """Read the ``(t, phi)`` pairs of a file written by :py:func:`.write_doa_track`."""
    with open(file, "r", encoding="utf-8", newline="") as f:
        rows = [row for row in csv.DictReader(f)]
    return [(float(row["t"]), float(row["phi_deg"])) for row in rows]
