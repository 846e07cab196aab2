import tempfile
import unittest
from pathlib import Path

import numpy as np

from egofuse.audio_doa import AudioClip, DoaEstimate, DoaGrid, aria_array
from egofuse.audio_range import CdrFrame, RangeCalibration
from egofuse.base import EgoObservation, Mode, ObjectEntry, Role, camera_entry
from egofuse.tracks import (
    AudioFrame, AudioTrackEntry, DescriptorError, DirectionRangeWarning,
    InvalidKeyframeWarning, MalformedDescriptorError, SegConfig, SegObservation,
    SegTrack, SegTrackFormatError, SnapshotDescriptor, TrackBundle,
    UnknownFieldWarning, audio_track_from_frames, build_audio_track, calibration_samples,
    centroid_to_observation, dump_bundle, dump_snapshot, filter_seg_confidence,
    load_bundle, parse_snapshot, read_audio_track, read_seg_tracks,
    read_snapshot, write_audio_track, write_seg_tracks
)
from egofuse.simkit import simulate_source

OPEN_MODEL = """Here is the descriptor:
```json
{
    "event": "the man speaks",
    "start_time": "0:02",
    "end_time": "0:07",
    "mode": egocentric,  // or allocentric
    "sounding_object": {"object_name": "man", "description": "man in a red shirt", "is_static": "false"},
    "stand_by_object": "camera",
    "facing_direction": {},
}
```"""

TRACKING = """{
    "event": "the phone rings",
    "start_time": "1:00",
    "end_time": "1:04.5",
    "mode": "allocentric",
    "confidence": 0.9,
    "sounding_object": {
        "object_name": "phone",
        "description": "black phone on the desk",
        "is_static": true,
        "key_frames": {
            "1:03": {"distance": 3, "direction": 120},
            "1:01": {"distance": "2 m", "direction": "-30°"},
            "1:02": {"distance": 0, "direction": 10}
        }
    },
    "reference_object": {"object_name": "sofa", "description": "grey sofa", "is_static": true},
    "facing_object": {"object_name": "window", "description": "large window", "is_static": true}
}"""


def _estimate(t: float, phi: float) -> DoaEstimate:
    return DoaEstimate(t, phi, np.zeros(360), DoaGrid(), 1.0, 0.1)


class TestSnapshot(unittest.TestCase):
    def test_open_model(self) -> None:
        descriptor, warnings = parse_snapshot(OPEN_MODEL)
        self.assertListEqual(warnings, [])
        self.assertEqual(descriptor.span, (2.0, 7.0))
        self.assertIs(descriptor.mode, Mode.EGOCENTRIC)
        self.assertEqual(descriptor.target, ObjectEntry("man", "man in a red shirt"))
        self.assertIs(descriptor.reference, camera_entry)
        self.assertFalse(descriptor.facing)

    def test_tracking(self) -> None:
        descriptor, warnings = parse_snapshot(TRACKING)
        self.assertEqual(descriptor.span, (60.0, 64.5))
        self.assertIs(descriptor.mode, Mode.ALLOCENTRIC)
        self.assertTrue(descriptor.target.is_static)
        self.assertTupleEqual(descriptor.target.keyframes,
                              (EgoObservation(61.0, -30.0, 2.0), EgoObservation(63.0, 120.0, 3.0)))
        self.assertEqual(descriptor.entry(Role.REFERENCE).name, "sofa")
        self.assertEqual(descriptor.entry(Role.FACING).name, "window")
        self.assertEqual(len(warnings), 3)
        self.assertIn(UnknownFieldWarning("confidence"), warnings)
        self.assertIn(DirectionRangeWarning("sounding_object.key_frames.1:03.direction", 120.0), warnings)
        invalid = [w for w in warnings if isinstance(w, InvalidKeyframeWarning)]
        self.assertEqual(invalid[0].path, "sounding_object.key_frames.1:02")

    def test_errors(self) -> None:
        with self.assertRaises(DescriptorError):
            parse_snapshot("I cannot answer this question.")
        with self.assertRaises(DescriptorError) as context:
            parse_snapshot(TRACKING.replace('"1:04.5"', '"0:59"'))
        self.assertEqual(context.exception.path, "end_time")
        with self.assertRaises(DescriptorError) as context:
            parse_snapshot(TRACKING.replace('"facing_object"', '"facing_direction"')
                           .replace('"window"', '"camera"'))
        self.assertEqual(context.exception.path, "facing_direction")
        with self.assertRaises(DescriptorError) as context:
            parse_snapshot(TRACKING.replace('"allocentric"', '"sideways"'))
        self.assertEqual(context.exception.path, "mode")

    def test_strict(self) -> None:
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "q1.json"
            path.write_text(TRACKING, encoding="utf-8")
            self.assertEqual(len(read_snapshot(path)[1]), 3)
            with self.assertRaises(MalformedDescriptorError) as context:
                read_snapshot(path, strict=True)
            self.assertEqual(len(context.exception.warnings), 3)

    def test_dump(self) -> None:
        descriptor, _ = parse_snapshot(TRACKING)
        parsed, warnings = parse_snapshot(dump_snapshot(descriptor))
        self.assertEqual(parsed, descriptor)
        self.assertEqual(len(warnings), 1)

    def test_invalid_span(self) -> None:
        with self.assertRaises(ValueError):
            SnapshotDescriptor("", (3.0, 3.0), Mode.EGOCENTRIC, ObjectEntry("a", ""))


class TestSegmentation(unittest.TestCase):
    def test_centroid(self) -> None:
        self.assertAlmostEqual(centroid_to_observation(640, 1280, 90.0, 2.0, 1.0).theta, 0.0)
        self.assertAlmostEqual(centroid_to_observation(1280, 1280, 90.0, 2.0, 1.0).theta, 45.0)
        self.assertAlmostEqual(centroid_to_observation(0, 1280, 90.0, 2.0, 1.0).theta, -45.0)
        with self.assertRaises(ValueError):
            centroid_to_observation(1300, 1280, 90.0, 2.0, 1.0)

    def test_confidence(self) -> None:
        observations = [SegObservation(0.0, 10.0, 2.0, c) for c in (0.4, 0.5, 0.6, 0.9)]
        self.assertEqual(len(filter_seg_confidence(observations, Role.TARGET)), 3)
        self.assertEqual(len(filter_seg_confidence(observations, Role.FACING)), 2)
        self.assertEqual(len(filter_seg_confidence(observations, Role.TARGET, SegConfig(target_threshold=1.0))), 0)
        with self.assertRaises(ValueError):
            SegObservation(0.0, 10.0, 2.0, 1.5)

    def test_file(self) -> None:
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "seg.csv"
            path.write_text("# frame_count: 64\n"
                            "role, t, theta_deg, r_m, confidence\n"
                            "# a comment\n"
                            "target, 0.5, -20, 2.5, 0.8\n"
                            "reference, 0.5, 30, 4, 0.9\n"
                            "target, 1.0, 190, 2.4, 0.7\n")
            tracks = read_seg_tracks(path)
            self.assertSetEqual(set(tracks), {Role.TARGET, Role.REFERENCE})
            self.assertEqual(tracks[Role.TARGET].frame_count, 64)
            self.assertEqual(tracks[Role.TARGET].observations[1].theta, -170.0)
            write_seg_tracks(tracks.values(), path)
            self.assertDictEqual(read_seg_tracks(path), tracks)

    def test_malformed_file(self) -> None:
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "seg.csv"
            path.write_text("target, 0.5, -20, 2.5, 0.8\ntarget, 0.4, -20, 2.5\n")
            with self.assertRaises(SegTrackFormatError) as context:
                read_seg_tracks(path)
            self.assertEqual(context.exception.line_number, 2)
            path.write_text("target, 0.5, -20, 2.5, 0.8\ntarget, 0.4, -20, 2.5, 0.8\n")
            with self.assertRaises(SegTrackFormatError):
                read_seg_tracks(path)
            path.write_text("speaker, 0.5, -20, 2.5, 0.8\n")
            with self.assertRaises(SegTrackFormatError):
                read_seg_tracks(path)

    def test_unsorted(self) -> None:
        with self.assertRaises(ValueError):
            SegTrack(Role.TARGET, (SegObservation(1.0, 0.0, 1.0, 1.0), SegObservation(0.5, 0.0, 1.0, 1.0)))


class TestAudioTrack(unittest.TestCase):
    def setUp(self) -> None:
        self.frames = [
            AudioFrame(_estimate(0.125, -40.0), CdrFrame(0.125, 1.0)),
            AudioFrame(_estimate(0.375, 3.0), CdrFrame(0.375, 4.0)),
            AudioFrame(_estimate(0.625, 50.0), None),
            AudioFrame(_estimate(0.875, 60.0), CdrFrame(0.875, 0.0)),
        ]

    def test_calibration_samples(self) -> None:
        visual = [EgoObservation(0.1, -38.0, 2.0), EgoObservation(0.5, 0.0, 1.0), EgoObservation(1.5, 0.0, 3.0)]
        self.assertListEqual(calibration_samples(self.frames, visual), [(2.0, 1.0), (1.0, 4.0)])
        self.assertListEqual(calibration_samples(self.frames, visual, tolerance=0.05), [(2.0, 1.0)])
        self.assertListEqual(calibration_samples(self.frames, []), [])

    def test_track(self) -> None:
        entries = audio_track_from_frames(self.frames, RangeCalibration(4.0, 10))
        self.assertListEqual([e.t for e in entries], [0.125, 0.625, 0.875])
        self.assertListEqual([e.r for e in entries], [2.0, None, None])
        self.assertEqual(entries[0].observation(), EgoObservation(0.125, -40.0, 2.0))
        self.assertIsNone(entries[1].observation())
        self.assertTrue(all(e.r is None for e in audio_track_from_frames(self.frames)))

    def test_file(self) -> None:
        entries = audio_track_from_frames(self.frames, RangeCalibration(4.0, 10))
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "audio_track.csv"
            write_audio_track(entries, path)
            self.assertListEqual(read_audio_track(path), entries)

    def test_from_clip(self) -> None:
        array = aria_array()
        signal = np.random.default_rng(5).standard_normal(24000)
        clip = simulate_source(array, 2.0 * array.direction(-60.0), signal, 48000)
        entries = build_audio_track(clip, array, hop=0.25)
        self.assertListEqual([e.t for e in entries], [0.125, 0.375])
        for entry in entries:
            self.assertAlmostEqual(entry.theta, -60.0, delta=3.0)
            self.assertIsNone(entry.r)
        self.assertListEqual(build_audio_track(AudioClip(48000, np.zeros((7, 24000))), array), [])


class TestBundle(unittest.TestCase):
    def test_file(self) -> None:
        descriptor, _ = parse_snapshot(TRACKING)
        seg = {Role.REFERENCE: SegTrack(Role.REFERENCE, (SegObservation(60.5, 20.0, 3.0, 0.9),), 64)}
        bundle = TrackBundle(descriptor, seg, (AudioTrackEntry(60.125, -30.0, None, 2.0, 0.1),))
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "q1.json"
            dump_bundle(bundle, path)
            self.assertEqual(load_bundle(path), bundle)

    def test_egocentric(self) -> None:
        descriptor, _ = parse_snapshot(OPEN_MODEL)
        with self.assertRaises(ValueError):
            TrackBundle(descriptor, {Role.REFERENCE: SegTrack(Role.REFERENCE)})


if __name__ == '__main__':
    unittest.main()
