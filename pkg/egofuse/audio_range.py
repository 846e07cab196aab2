"""Source distance from the coherent-to-diffuse ratio (CDR).

The direct path of a near source is coherent across the microphones while
the reverberant field is diffuse. The ratio of both powers decreases with
the source distance, and ``distance**2 * cdr`` stays roughly constant in a
given room. That constant ``K`` is calibrated from frames with a known
distance, after which ``distance = sqrt(K / cdr)``.

The estimator is the DoA-independent one, built from the measured complex
coherence of each microphone pair and the coherence of the diffuse noise
model for the pair spacing::

    cdr = (Gn Re(Gx) - |Gx|^2
           - sqrt(Gn^2 Re(Gx)^2 - Gn^2 |Gx|^2 + Gn^2 - 2 Gn Re(Gx) + |Gx|^2))
          / (|Gx|^2 - 1)

with ``Gn = sinc(2 f d / c)`` for a spherically isotropic field, or ``Gn = 0``
for noise independent across channels.
"""

from typing import Iterable, Literal
from dataclasses import asdict, dataclass
from pathlib import Path
import json
import logging
import math

import numpy as np
import numpy.typing as npt
from scipy import signal  # type: ignore[import-untyped]
from sklearn.cluster import DBSCAN  # type: ignore[import-untyped]

from .audio_doa import ArrayError, AudioClip, MicArray, SegmentError
from .base import EgofuseError, Meters, Seconds

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

_COHERENCE_LIMIT = 1.0 - 1e-12


class UndefinedCdrError(EgofuseError):
    """The segment carries no energy, so no coherence can be measured."""


class CalibrationError(EgofuseError):
    """No consistent group of calibration samples was found."""


@dataclass(frozen=True, slots=True)
class WelchConfig:
    """Settings of the spectral averaging behind the coherence estimate."""
    segment_length: int = 1536
    """Window length in samples."""
    overlap: float = 0.5
    """Fraction of a window shared with the next one, in ``[0, 1)``."""
    band: tuple[float, float] = (500.0, 2000.0)
    """Frequencies in Hz averaged into the CDR."""
    diffuse_model: Literal["spherical", "incoherent"] = "incoherent"
    """Coherence of the noise field. The spherical model reads noise that is
    independent across channels as partly coherent."""
    frame: Seconds = 0.5
    """Length of the audio analysed for each CDR value."""
    max_cdr: float = 1e6

    def __post_init__(self) -> None:
        if self.segment_length < 2:
            raise ValueError(f"Invalid Welch segment length: {self.segment_length}")
        if not 0 <= self.overlap < 1:
            raise ValueError(f"Overlap must be in [0, 1), got {self.overlap}")
        low, high = self.band
        if not 0 <= low < high:
            raise ValueError(f"Invalid band: {self.band}")
        if self.diffuse_model not in ("spherical", "incoherent"):
            raise ValueError(f"Unknown diffuse model {self.diffuse_model!r}")
        if self.frame <= 0 or self.max_cdr <= 0:
            raise ValueError("CDR frame and upper bound must be positive")

    @property
    def hop(self) -> int:
        return max(1, self.segment_length - int(round(self.overlap * self.segment_length)))

    def check_rate(self, sample_rate: float) -> None:
        if self.band[1] > sample_rate / 2:
            raise ValueError(f"Band {self.band} above the Nyquist frequency of {sample_rate} Hz")


@dataclass(frozen=True, slots=True)
class CdrFrame:
    t: Seconds
    """Center of the analysed audio."""
    cdr: float
    """Coherent-to-diffuse power ratio, non-negative."""


@dataclass(frozen=True, slots=True)
class CalibrationConfig:
    """DBSCAN settings for the selection of the calibration inliers."""
    eps_factor: float = 0.25
    """Neighborhood radius as a fraction of the median product, used when ``eps`` is unset."""
    min_pts: int = 3
    eps: float | None = None
    tolerance: Seconds = 0.25
    """Largest time gap between a CDR frame and the visual distance it is paired with."""

    def __post_init__(self) -> None:
        if self.eps_factor <= 0 or self.min_pts < 1:
            raise ValueError("Invalid calibration clustering settings")
        if self.eps is not None and self.eps <= 0:
            raise ValueError(f"Invalid calibration eps: {self.eps}")
        if self.tolerance < 0:
            raise ValueError(f"Invalid pairing tolerance: {self.tolerance}")


@dataclass(frozen=True, slots=True)
class RangeCalibration:
    """Room constant relating the CDR to the source distance."""
    k: float
    """Constant ``distance**2 * cdr``, in square meters."""
    inlier_count: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.k) and self.k > 0):
            raise ValueError(f"Calibration constant must be positive, got {self.k}")


def diffuse_coherence(frequencies: FloatArray, spacing: Meters, c: float,
                      model: Literal["spherical", "incoherent"]) -> FloatArray:
    """Coherence of the diffuse field between two microphones ``spacing`` apart."""
    if model == "incoherent":
        return np.zeros_like(frequencies)
    # numpy's sinc is sin(pi x) / (pi x)
    result: FloatArray = np.sinc(2.0 * frequencies * spacing / c)
    return result


def effective_window_count(window: FloatArray, hop: int, count: int) -> float:
    """Number of independent windows equivalent to ``count`` overlapping ones.

    Used to remove the bias of the magnitude squared coherence, which is
    about ``1 / count`` for uncorrelated signals."""
    total = float(np.sum(window ** 2))
    variance_factor = 1.0
    for j in range(1, count):
        shift = j * hop
        if shift >= len(window):
            break
        rho = float(np.sum(window[:-shift] * window[shift:])) / total
        variance_factor += 2.0 * (1.0 - j / count) * rho ** 2
    return count / variance_factor


def cdr_from_coherence(coherence: npt.NDArray[np.complex128], noise_coherence: FloatArray) -> FloatArray:
    """Apply the DoA-independent estimator bin by bin. The result may be negative."""
    magnitude = np.abs(coherence)
    scale = np.where(magnitude > _COHERENCE_LIMIT, _COHERENCE_LIMIT / np.maximum(magnitude, 1e-300), 1.0)
    gamma_x = coherence * scale
    gamma_n = noise_coherence
    real = gamma_x.real
    power = np.abs(gamma_x) ** 2
    radicand = (gamma_n ** 2 * real ** 2 - gamma_n ** 2 * power + gamma_n ** 2
                - 2.0 * gamma_n * real + power)
    result: FloatArray = (gamma_n * real - power - np.sqrt(np.maximum(radicand, 0.0))) / (power - 1.0)
    return result


def _pair_coherence(spectra: npt.NDArray[np.complex128], m: int, n: int,
                    effective_count: float) -> npt.NDArray[np.complex128]:
    cross = np.mean(spectra[m] * np.conj(spectra[n]), axis=-1)
    auto_m = np.mean(np.abs(spectra[m]) ** 2, axis=-1)
    auto_n = np.mean(np.abs(spectra[n]) ** 2, axis=-1)
    denominator = np.sqrt(auto_m * auto_n)
    raw = np.where(denominator > 0, cross / np.maximum(denominator, 1e-300), 0.0)
    if effective_count <= 1.0:
        return raw
    squared = np.abs(raw) ** 2
    debiased = np.clip((effective_count * squared - 1.0) / (effective_count - 1.0), 0.0, 1.0)
    phase = np.where(np.abs(raw) > 0, raw / np.maximum(np.abs(raw), 1e-300), 1.0)
    result: npt.NDArray[np.complex128] = phase * np.sqrt(debiased)
    return result


def estimate_cdr(clip: AudioClip, segment: tuple[Seconds, Seconds], array: MicArray,
                 config: WelchConfig = WelchConfig()) -> CdrFrame:
    """Coherent-to-diffuse ratio of the segment ``(start, duration)``.

    Computed per microphone pair, clipped to ``[0, max_cdr]`` bin by bin,
    averaged over the band, then averaged across pairs. Pairs of coincident
    microphones are skipped."""
    if clip.channel_count != array.count:
        raise ArrayError(f"{clip.channel_count} channels for {array.count} microphones")
    config.check_rate(clip.sample_rate)
    start, duration = segment
    samples = clip.samples(start, duration)
    if samples.shape[1] < config.segment_length + config.hop:
        raise SegmentError(f"Segment of {samples.shape[1]} samples too short for two Welch windows")
    if not np.any(samples):
        raise UndefinedCdrError(f"Silent segment at {start} s")
    frequencies, _, spectra = signal.stft(
        samples, fs=clip.sample_rate, window="hann", nperseg=config.segment_length,
        noverlap=config.segment_length - config.hop, boundary=None, padded=False, axis=-1)
    low, high = config.band
    in_band = (frequencies >= low) & (frequencies <= high)
    spectra = spectra[:, in_band, :]
    frequencies = frequencies[in_band]
    window_count = spectra.shape[-1]
    if window_count < 2:
        raise SegmentError("Segment too short for two Welch windows")
    effective_count = effective_window_count(
        signal.get_window("hann", config.segment_length), config.hop, window_count)

    values = []
    for m, n in array.pairs():
        spacing = array.spacing(m, n)
        if spacing < 1e-9:
            logger.debug("Skipped pair (%d, %d) with zero spacing", m, n)
            continue
        if not np.any(samples[m]) or not np.any(samples[n]):
            continue
        coherence = _pair_coherence(spectra, m, n, effective_count)
        noise = diffuse_coherence(frequencies, spacing, array.c, config.diffuse_model)
        ratio = np.clip(cdr_from_coherence(coherence, noise), 0.0, config.max_cdr)
        values.append(float(np.mean(ratio)))
    if not values:
        raise UndefinedCdrError(f"No usable microphone pair at {start} s")
    return CdrFrame(start + duration / 2, float(np.mean(values)))


def calibrate_k(samples: Iterable[tuple[Meters, float]],
                config: CalibrationConfig = CalibrationConfig()) -> RangeCalibration:
    """Fit the room constant from ``(known distance, cdr)`` samples.

    The products ``distance**2 * cdr`` are clustered with DBSCAN; the largest
    cluster is kept (the one with the smallest mean on a size tie) and its
    mean is the constant, which minimizes the squared error to the inliers."""
    products = np.sort(np.array([d * d * c for d, c in samples if c > 0 and d > 0], dtype=np.float64))
    if len(products) < 3:
        raise CalibrationError(f"At least 3 samples with a positive cdr are needed, got {len(products)}")
    eps = config.eps if config.eps is not None else config.eps_factor * float(np.median(products))
    labels = DBSCAN(eps=eps, min_samples=config.min_pts).fit(products.reshape(-1, 1)).labels_
    clusters = [products[labels == label] for label in sorted(set(labels) - {-1})]
    if not clusters:
        raise CalibrationError("Every calibration sample is an outlier")
    inliers = min(clusters, key=lambda cluster: (-len(cluster), float(np.mean(cluster))))
    calibration = RangeCalibration(float(np.mean(inliers)), len(inliers))
    logger.info("Calibrated K = %.4g from %d of %d samples", calibration.k, len(inliers), len(products))
    return calibration


def distance_from_cdr(cdr: float, calib: RangeCalibration) -> Meters | None:
    """``sqrt(K / cdr)``, or None when the cdr isn't positive."""
    if not cdr > 0:
        return None
    return math.sqrt(calib.k / cdr)


def write_calibration(calib: RangeCalibration, file: str | Path) -> None:
    with open(file, "w", encoding="utf-8") as f:
        json.dump(asdict(calib), f, indent=2)
        f.write("\n")


def read_calibration(file: str | Path) -> RangeCalibration:
    with open(file, "r", encoding="utf-8") as f:
        data = json.load(f)
    try:
        return RangeCalibration(float(data["k"]), int(data["inlier_count"]))
    except (KeyError, TypeError, ValueError) as error:
        raise CalibrationError(f"{file}: invalid calibration ({error})") from None
