import tempfile
import unittest
from pathlib import Path

import numpy as np

from egofuse.audio_doa import AudioClip, SegmentError, aria_array
from egofuse.audio_range import (
    CalibrationConfig, CalibrationError, RangeCalibration, UndefinedCdrError,
    WelchConfig, calibrate_k, cdr_from_coherence, diffuse_coherence,
    distance_from_cdr, effective_window_count, estimate_cdr, read_calibration,
    write_calibration
)
from egofuse.simkit import simulate_source

RATE = 16000


class TestCoherence(unittest.TestCase):
    def test_diffuse(self) -> None:
        frequencies = np.array([0.0, 343.0 / 0.28])
        np.testing.assert_allclose(diffuse_coherence(frequencies, 0.14, 343.0, "spherical"), [1.0, 0.0], atol=1e-12)
        self.assertFalse(np.any(diffuse_coherence(frequencies, 0.14, 343.0, "incoherent")))

    def test_incoherent_noise(self) -> None:
        # Against independent noise the ratio is |g| / (1 - |g|).
        coherence = np.array([0.5, 0.2j, 0.0, 0.8])
        expected = [1.0, 0.25, 0.0, 4.0]
        np.testing.assert_allclose(cdr_from_coherence(coherence, np.zeros(4)), expected, atol=1e-9)

    def test_effective_count(self) -> None:
        window = np.hanning(64)
        self.assertEqual(effective_window_count(window, 64, 10), 10.0)
        self.assertEqual(effective_window_count(window, 32, 1), 1.0)
        self.assertLess(effective_window_count(window, 16, 10), 10.0)


class TestEstimate(unittest.TestCase):
    config = WelchConfig(diffuse_model="incoherent")

    def _cdr(self, distance: float) -> float:
        array = aria_array()
        signal = np.random.default_rng(2).standard_normal(2 * RATE)
        clip = simulate_source(array, distance * array.direction(30.0), signal, RATE, diffuse_snr=0.0, seed=5)
        return estimate_cdr(clip, (0.1, 1.8), array, self.config).cdr

    def test_distance_law(self) -> None:
        near = self._cdr(1.0)
        far = self._cdr(2.0)
        self.assertGreater(near, far)
        self.assertTrue(2.5 < near / far < 6.0, near / far)

    def test_silent(self) -> None:
        clip = AudioClip(RATE, np.zeros((7, RATE)))
        with self.assertRaises(UndefinedCdrError):
            estimate_cdr(clip, (0.0, 0.5), aria_array(), self.config)

    def test_short(self) -> None:
        clip = AudioClip(RATE, np.ones((7, RATE)))
        with self.assertRaises(SegmentError):
            estimate_cdr(clip, (0.0, 0.1), aria_array(), self.config)

    def test_nyquist(self) -> None:
        clip = AudioClip(2000, np.ones((7, 2000)))
        with self.assertRaises(ValueError):
            estimate_cdr(clip, (0.0, 1.0), aria_array(), self.config)


class TestReference(unittest.TestCase):
    rate = 48000
    array = aria_array("34")

    def _mix(self, coherent: float, independent: float, seconds: float = 2.0) -> AudioClip:
        rng = np.random.default_rng(11)
        common = rng.standard_normal(int(seconds * self.rate))
        noise = rng.standard_normal((2, len(common)))
        return AudioClip(self.rate, coherent * common + independent * noise)

    def test_identical_channels(self) -> None:
        cdr = estimate_cdr(self._mix(1.0, 0.0), (0.0, 2.0), self.array).cdr
        self.assertGreaterEqual(cdr, 1e3)

    def test_independent_channels(self) -> None:
        cdr = estimate_cdr(self._mix(0.0, 1.0), (0.0, 2.0), self.array).cdr
        self.assertLessEqual(cdr, 0.1)

    def test_equal_mix(self) -> None:
        cdr = estimate_cdr(self._mix(1.0, 1.0), (0.0, 2.0), self.array).cdr
        self.assertTrue(0.5 <= cdr <= 2.0, cdr)

    def test_gain(self) -> None:
        clip = self._mix(1.0, 1.0)
        louder = AudioClip(self.rate, 10.0 * clip.channels)
        cdr = estimate_cdr(clip, (0.0, 2.0), self.array).cdr
        self.assertAlmostEqual(estimate_cdr(louder, (0.0, 2.0), self.array).cdr, cdr, delta=1e-9 * cdr)

    def test_distances_after_calibration(self) -> None:
        array = aria_array()
        signal = np.random.default_rng(4).standard_normal(int(6.2 * self.rate))
        frames = []
        for distance in (1.0, 2.0, 3.0):
            clip = simulate_source(array, distance * array.direction(30.0), signal, self.rate,
                                   diffuse_snr=0.0, seed=int(distance))
            frames += [(distance, estimate_cdr(clip, (start, 2.0), array).cdr) for start in (0.1, 2.1, 4.1)]
        calibration = calibrate_k(frames)
        for distance, cdr in frames:
            estimate = distance_from_cdr(cdr, calibration)
            assert estimate is not None
            self.assertLessEqual(abs(estimate - distance), 0.2 * distance, (distance, estimate))

    def test_calibration_example(self) -> None:
        samples = [(1.0, 4.0), (1.0, 4.1), (1.0, 3.9), (1.0, 4.0), (1.0, 100.0)]
        config = CalibrationConfig(eps=0.5, min_pts=2)
        calibration = calibrate_k(samples, config)
        self.assertAlmostEqual(calibration.k, 4.0)
        self.assertEqual(calibration.inlier_count, 4)
        rng = np.random.default_rng(6)
        for _ in range(5):
            order = rng.permutation(len(samples))
            self.assertEqual(calibrate_k([samples[i] for i in order], config), calibration)


class TestCalibration(unittest.TestCase):
    def test_outliers(self) -> None:
        rng = np.random.default_rng(9)
        distances = rng.uniform(1.0, 5.0, 90)
        samples = [(d, 4.0 / d ** 2 * rng.uniform(0.99, 1.01)) for d in distances]
        samples += [(1.0, 10.0 * k) for k in range(1, 11)]
        calibration = calibrate_k(samples)
        self.assertAlmostEqual(calibration.k, 4.0, delta=0.04)
        self.assertEqual(calibration.inlier_count, 90)

    def test_no_cluster(self) -> None:
        with self.assertRaises(CalibrationError):
            calibrate_k([(1.0, 1.0), (1.0, 10.0), (1.0, 100.0)])
        with self.assertRaises(CalibrationError):
            calibrate_k([(1.0, 1.0), (2.0, 0.25), (3.0, 0.0)])

    def test_config(self) -> None:
        with self.assertRaises(ValueError):
            CalibrationConfig(min_pts=0)
        with self.assertRaises(ValueError):
            CalibrationConfig(tolerance=-1.0)

    def test_distance(self) -> None:
        calibration = RangeCalibration(4.0, 10)
        self.assertEqual(distance_from_cdr(1.0, calibration), 2.0)
        self.assertEqual(distance_from_cdr(16.0, calibration), 0.5)
        self.assertIsNone(distance_from_cdr(0.0, calibration))
        with self.assertRaises(ValueError):
            RangeCalibration(0.0, 1)

    def test_file(self) -> None:
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "calibration.json"
            write_calibration(RangeCalibration(3.5, 12), path)
            self.assertEqual(read_calibration(path), RangeCalibration(3.5, 12))
            path.write_text('{"k": 3.5}')
            with self.assertRaises(CalibrationError):
                read_calibration(path)


if __name__ == '__main__':
    unittest.main()
