import math
import tempfile
import unittest
from pathlib import Path

from egofuse.base import EgoObservation, GlobalPoint, Mode, ObjectEntry, Role, Source
from egofuse.fusion import GlobalMap, GlobalTrack, StaticAnchor, TrackPoint
from egofuse.geometry import CameraTrajectory, pose_from_heading
from egofuse.qa import (
    Answer, MissingPlaceholderError, ModeMismatchError, Question,
    QuestionFormatError, QuestionKind, ResolverConfig, UnanswerableError,
    default_options, evaluation_time, question_from_dict, read_answers,
    read_questions, render_question, resolve, resolve_direct, write_answers,
    write_questions
)
from egofuse.tracks import AudioTrackEntry, SegObservation, SegTrack, SnapshotDescriptor, TrackBundle

still = CameraTrajectory((pose_from_heading(0.0, (0.0, 0.0, 0.0), 0.0),
                          pose_from_heading(10.0, (0.0, 0.0, 0.0), 0.0)))


def _track(x: float, y: float) -> GlobalTrack:
    return GlobalTrack((TrackPoint(1.0, GlobalPoint(x, y), Source.SMOOTHED),
                        TrackPoint(3.0, GlobalPoint(x, y), Source.SMOOTHED)))


def _question(kind: QuestionKind, **kwargs: object) -> Question:
    reference = "sofa" if kind.mode is Mode.ALLOCENTRIC else None
    return Question("q", kind, "speech", options=default_options(kind), reference=reference,
                    **kwargs)  # type: ignore[arg-type]


class TestKinds(unittest.TestCase):
    def test_properties(self) -> None:
        self.assertIs(QuestionKind.ALLO_DIST.mode, Mode.ALLOCENTRIC)
        self.assertIs(QuestionKind.EGO_DIR_HARD.mode, Mode.EGOCENTRIC)
        self.assertFalse(QuestionKind.EGO_DIST.is_direction)
        self.assertTrue(QuestionKind.ALLO_DIR_SIMPLE.is_simple)
        self.assertIsNone(default_options(QuestionKind.EGO_DIST))
        self.assertTupleEqual(default_options(QuestionKind.EGO_DIR_SIMPLE), ("left", "right", "back"))

    def test_validation(self) -> None:
        with self.assertRaises(ValueError):
            Question("q", QuestionKind.EGO_DIR_SIMPLE, "speech")
        with self.assertRaises(ValueError):
            Question("q", QuestionKind.ALLO_DIST, "speech")
        with self.assertRaises(ValueError):
            Question("q", QuestionKind.EGO_DIST, "speech", span=(2.0, 1.0))
        with self.assertRaises(ValueError):
            Answer("q")
        with self.assertRaises(ValueError):
            Answer("q", label="left", meters=2.0)


class TestEvaluationTime(unittest.TestCase):
    def test_rules(self) -> None:
        global_map = GlobalMap(_track(0.0, 1.0), (1.0, 3.0), Mode.EGOCENTRIC,
                               audio_energy=((0.5, 0.9), (1.2, 0.1), (1.8, 0.5), (2.5, 0.5)))
        self.assertEqual(evaluation_time((1.0, 3.0)), 2.0)
        self.assertEqual(evaluation_time((1.0, 3.0), global_map, "start"), 1.0)
        self.assertEqual(evaluation_time((1.0, 3.0), global_map, "peak_energy"), 1.8)
        self.assertEqual(evaluation_time((1.0, 3.0), GlobalMap(_track(0.0, 1.0), (1.0, 3.0), Mode.EGOCENTRIC),
                                         "peak_energy"), 2.0)


class TestResolve(unittest.TestCase):
    def setUp(self) -> None:
        self.front_left = GlobalMap(_track(-1.0, 1.0), (1.0, 3.0), Mode.EGOCENTRIC)
        self.behind = GlobalMap(_track(1.0, -1.0), (1.0, 3.0), Mode.EGOCENTRIC)
        self.allocentric = GlobalMap(_track(1.0, -1.0), (1.0, 3.0), Mode.ALLOCENTRIC,
                                     StaticAnchor(GlobalPoint(0.0, 0.0), 3, Source.SD),
                                     StaticAnchor(GlobalPoint(1.0, 0.0), 3, Source.SD))

    def test_egocentric(self) -> None:
        answer = resolve(self.front_left, _question(QuestionKind.EGO_DIR_SIMPLE), still)
        self.assertEqual(answer.label, "left")
        self.assertEqual(answer.eval_time, 2.0)
        assert answer.theta is not None
        self.assertAlmostEqual(answer.theta, -45.0)
        self.assertEqual(resolve(self.front_left, _question(QuestionKind.EGO_DIR_HARD), still).label, "front-left")
        self.assertEqual(resolve(self.behind, _question(QuestionKind.EGO_DIR_SIMPLE), still).label, "back")
        self.assertEqual(resolve(self.behind, _question(QuestionKind.EGO_DIR_HARD), still).label, "back-right")
        answer = resolve(self.behind, _question(QuestionKind.EGO_DIST), still)
        assert answer.meters is not None
        self.assertAlmostEqual(answer.meters, math.sqrt(2.0))

    def test_allocentric(self) -> None:
        # Facing along +x, so the target at (1, -1) is 45 degrees to the right.
        self.assertEqual(resolve(self.allocentric, _question(QuestionKind.ALLO_DIR_SIMPLE), still).label, "right")
        self.assertEqual(resolve(self.allocentric, _question(QuestionKind.ALLO_DIR_HARD), still).label,
                         "front-right")
        answer = resolve(self.allocentric, _question(QuestionKind.ALLO_DIST), still)
        assert answer.meters is not None
        self.assertAlmostEqual(answer.meters, math.sqrt(2.0))

    def test_options_text(self) -> None:
        q = Question("q", QuestionKind.EGO_DIR_HARD, "speech",
                     options=("Front-Left", "Front-Right", "Back-Left", "Back-Right"))
        self.assertEqual(resolve(self.front_left, q, still).label, "Front-Left")

    def test_question_span(self) -> None:
        q = _question(QuestionKind.EGO_DIST, span=(1.0, 1.5))
        self.assertEqual(resolve(self.front_left, q, still).eval_time, 1.25)
        q = _question(QuestionKind.EGO_DIST)
        answer = resolve(self.front_left, q, still, ResolverConfig(eval_time="start"))
        self.assertEqual(answer.eval_time, 1.0)

    def test_errors(self) -> None:
        with self.assertRaises(ModeMismatchError):
            resolve(self.front_left, _question(QuestionKind.ALLO_DIST), still)
        with self.assertRaises(UnanswerableError):
            resolve(GlobalMap(GlobalTrack(), (1.0, 3.0), Mode.EGOCENTRIC), _question(QuestionKind.EGO_DIST), still)
        with self.assertRaises(UnanswerableError):
            resolve(GlobalMap(_track(0.0, 0.0), (1.0, 3.0), Mode.EGOCENTRIC),
                    _question(QuestionKind.EGO_DIR_SIMPLE), still)


class TestResolveDirect(unittest.TestCase):
    def setUp(self) -> None:
        descriptor = SnapshotDescriptor("speech", (1.0, 3.0), Mode.EGOCENTRIC,
                                        ObjectEntry("man", "", keyframes=(EgoObservation(2.0, -35.0, 3.0),)))
        seg = SegTrack(Role.TARGET, (SegObservation(1.5, -30.0, 2.0, 0.9), SegObservation(2.0, 100.0, 2.5, 0.3),
                                     SegObservation(2.5, 40.0, 2.2, 0.8)))
        audio = (AudioTrackEntry(2.2, -50.0, None), AudioTrackEntry(5.0, 150.0, 1.0))
        self.bundle = TrackBundle(descriptor, {Role.TARGET: seg}, audio)

    def test_vote(self) -> None:
        answer = resolve_direct(self.bundle, _question(QuestionKind.EGO_DIR_SIMPLE))
        self.assertEqual(answer.label, "left")
        self.assertEqual(answer.eval_time, 2.0)

    def test_tie(self) -> None:
        config = ResolverConfig(sources=frozenset({Source.SEG}))
        self.assertEqual(resolve_direct(self.bundle, _question(QuestionKind.EGO_DIR_SIMPLE), config).label, "left")

    def test_distance(self) -> None:
        answer = resolve_direct(self.bundle, _question(QuestionKind.EGO_DIST))
        self.assertEqual(answer.meters, 2.2)

    def test_errors(self) -> None:
        with self.assertRaises(ModeMismatchError):
            resolve_direct(self.bundle, _question(QuestionKind.ALLO_DIST))
        with self.assertRaises(UnanswerableError):
            resolve_direct(self.bundle, _question(QuestionKind.EGO_DIST, span=(4.0, 6.0)),
                           ResolverConfig(sources=frozenset({Source.SEG})))


class TestTemplates(unittest.TestCase):
    def test_variants(self) -> None:
        text = render_question(QuestionKind.EGO_DIR_SIMPLE, {"sound_event": "dog barking"})
        self.assertIn("when the dog barking sound comes up", text)
        text = render_question(QuestionKind.ALLO_DIST, {"speech_topic": "the weather", "reference": "sofa"})
        self.assertIn("the weather", text)
        self.assertIn("between the sofa and", text)

    def test_missing(self) -> None:
        with self.assertRaises(MissingPlaceholderError) as context:
            render_question(QuestionKind.ALLO_DIR_HARD, {"sound_event": "knock", "reference": "door"})
        self.assertEqual(context.exception.name, "facing")
        with self.assertRaises(MissingPlaceholderError) as context:
            render_question(QuestionKind.EGO_DIST, {})
        self.assertEqual(context.exception.name, "sound_event")


class TestFiles(unittest.TestCase):
    def test_questions(self) -> None:
        questions = [
            _question(QuestionKind.EGO_DIR_HARD, span=(1.0, 2.5), text="Where is the speaker?"),
            Question("q2", QuestionKind.ALLO_DIST, "knock", reference="door", facing="window"),
        ]
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "questions.jsonl"
            write_questions(questions, path)
            self.assertListEqual(read_questions(path), questions)
            path.write_text('{"id": "q1", "kind": "ego_dist", "event": "x"}\n\n{"id": "q2", "kind": "ego_up"}\n')
            with self.assertRaises(QuestionFormatError) as context:
                read_questions(path)
            self.assertEqual(context.exception.line_number, 3)

    def test_timestamp_span(self) -> None:
        q = question_from_dict({"id": "q", "kind": "ego_dir_simple", "event": "x", "span": ["0:01", "0:02.5"]})
        self.assertEqual(q.span, (1.0, 2.5))
        self.assertTupleEqual(q.options, ("left", "right", "back"))

    def test_answers(self) -> None:
        answers = [Answer("q1", label="back-right", eval_time=2.0), Answer("q2", meters=math.sqrt(2.0))]
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "answers.jsonl"
            write_answers(answers, path)
            self.assertDictEqual(read_answers(path), {"q1": "back-right", "q2": "1.41"})


if __name__ == '__main__':
    unittest.main()
