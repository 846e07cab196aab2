import json
import tempfile
import unittest
from pathlib import Path

from egofuse.base import EgoObservation
from egofuse.metrics import (
    EmptyPredictionsError, LengthMismatchError, MetricsConfig, UnknownIdError,
    distance_score, evaluate_doa, evaluate_run, interval_iou, loc_accuracy,
    lr_fb_accuracy, mcq_score, read_angle_track, render_doa_report,
    render_report, t_miou, write_items
)
from egofuse.qa import Question, QuestionKind, default_options

QUADRANTS = default_options(QuestionKind.EGO_DIR_HARD) or ()


class TestScores(unittest.TestCase):
    def test_mcq(self) -> None:
        self.assertEqual(mcq_score("D. back-right", "back-right", QUADRANTS), 1)
        self.assertEqual(mcq_score("d", "back-right", QUADRANTS), 1)
        self.assertEqual(mcq_score("Back Right", "back-right", QUADRANTS), 1)
        self.assertEqual(mcq_score("C", "back-right", QUADRANTS), 0)
        self.assertEqual(mcq_score("back", "back-right", QUADRANTS), 0)
        self.assertEqual(mcq_score("", "back-right", QUADRANTS), 0)

    def test_mcq_truth_outside_options(self) -> None:
        self.assertEqual(mcq_score("left", "back", ("left", "right")), 0)
        self.assertEqual(mcq_score("A", "back", ("left", "right")), 0)
        self.assertEqual(mcq_score("Back", "back", ("left", "right")), 1)
        self.assertEqual(mcq_score("back", "back", ()), 1)

    def test_distance(self) -> None:
        self.assertAlmostEqual(distance_score("2.5 m", 2.0), 0.6)
        self.assertEqual(distance_score(2.0, 2.0), 1.0)
        self.assertEqual(distance_score("7", 2.0), 0.0)
        self.assertEqual(distance_score("about two meters", 2.0), 0.0)
        self.assertEqual(distance_score("nan", 2.0), 0.0)
        with self.assertRaises(ValueError):
            distance_score(1.0, 0.0)

    def test_interval_iou(self) -> None:
        self.assertAlmostEqual(interval_iou((10.0, 20.0), (12.0, 22.0)), 2.0 / 3.0)
        self.assertEqual(interval_iou((0.0, 1.0), (2.0, 3.0)), 0.0)
        self.assertEqual(interval_iou((0.0, 1.0), (0.0, 1.0)), 1.0)
        with self.assertRaises(ValueError):
            interval_iou((1.0, 1.0), (0.0, 2.0))

    def test_t_miou(self) -> None:
        recall = t_miou([(10.0, 20.0), (0.0, 1.0)], [(12.0, 22.0), (5.0, 6.0)])
        self.assertEqual(len(recall.recalls), 10)
        self.assertEqual(recall.mean, 0.5)
        with self.assertRaises(LengthMismatchError):
            t_miou([(0.0, 1.0)], [])
        with self.assertRaises(EmptyPredictionsError):
            t_miou([], [])

    def test_loc(self) -> None:
        truth = EgoObservation(1.0, 0.0, 2.0)
        self.assertFalse(loc_accuracy(EgoObservation(1.0, 45.0, 2.0), truth).correct)
        self.assertTrue(loc_accuracy(EgoObservation(1.0, -44.0, 2.5), truth).correct)
        self.assertFalse(loc_accuracy(EgoObservation(1.0, 0.0, 3.0), truth).correct)
        result = loc_accuracy(EgoObservation(1.0, 170.0, 2.0), EgoObservation(1.0, -170.0, 2.0))
        self.assertAlmostEqual(result.theta_err, 20.0)

    def test_sides(self) -> None:
        self.assertEqual(lr_fb_accuracy(150.0, 30.0), (1, 0))
        self.assertEqual(lr_fb_accuracy(-30.0, 30.0), (0, 1))
        self.assertEqual(lr_fb_accuracy(-120.0, 90.0), (0, 1))


class TestEvaluateRun(unittest.TestCase):
    def setUp(self) -> None:
        self.questions = [
            Question("q1", QuestionKind.EGO_DIR_SIMPLE, "speech", options=("left", "right", "back")),
            Question("q2", QuestionKind.EGO_DIST, "speech"),
            Question("q3", QuestionKind.ALLO_DIR_HARD, "knock", options=QUADRANTS, reference="sofa"),
        ]
        self.truth = {"q1": "left", "q2": "2.0", "q3": "back-right"}

    def test_report(self) -> None:
        report = evaluate_run(self.questions, {"q1": "A", "q2": "2.5"}, self.truth)
        self.assertDictEqual(report.columns, {"Ego Dir": 1.0, "Ego Dist": 0.6, "Allo Dir": 0.0})
        self.assertAlmostEqual(report.overall, 1.6 / 3)
        self.assertDictEqual(report.counts, {"ego_dir_simple": 1, "ego_dist": 1, "allo_dir_hard": 1})
        self.assertIsNone(report.items[2].prediction)
        text = render_report(report)
        self.assertIn("Overall", text)
        self.assertIn("53.3", text)
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "items.jsonl"
            write_items(report, path)
            lines = [json.loads(line) for line in path.read_text().splitlines()]
        self.assertEqual(lines[1], {"id": "q2", "kind": "ego_dist", "score": 0.6, "prediction": "2.5",
                                    "truth": "2.0"})

    def test_errors(self) -> None:
        with self.assertRaises(EmptyPredictionsError):
            evaluate_run(self.questions, {}, self.truth)
        with self.assertRaises(UnknownIdError) as context:
            evaluate_run(self.questions, {"q9": "A"}, self.truth)
        self.assertListEqual(context.exception.ids, ["q9"])
        with self.assertRaises(UnknownIdError):
            evaluate_run(self.questions, {"q1": "A"}, {"q1": "left"})

    def test_thresholds(self) -> None:
        with self.assertRaises(ValueError):
            MetricsConfig(dist_thresholds=(0.5, 0.2))
        report = evaluate_run(self.questions[1:2], {"q2": "2.5"}, self.truth, MetricsConfig(dist_thresholds=(0.5,)))
        self.assertEqual(report.overall, 1.0)


class TestEvaluateDoa(unittest.TestCase):
    def test_report(self) -> None:
        truth = [EgoObservation(0.125, 30.0, 2.0), EgoObservation(0.375, -100.0, 3.0)]
        predictions = [(0.125, 40.0, 2.5), (0.375, -80.0, None), (2.0, 0.0, None)]
        report = evaluate_doa(predictions, truth)
        self.assertEqual(report.matched, 2)
        self.assertAlmostEqual(report.median_error, 15.0)
        self.assertAlmostEqual(report.p95_error, 19.5)
        self.assertEqual(report.lr_accuracy, 1.0)
        self.assertEqual(report.fb_accuracy, 0.5)
        self.assertEqual(report.loc_acc, 1.0)
        self.assertIn("f/b          50.0", render_doa_report(report))
        with self.assertRaises(EmptyPredictionsError):
            evaluate_doa([(5.0, 0.0, None)], truth)

    def test_read_track(self) -> None:
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "doa.csv"
            path.write_text("t, phi_deg, r_m\n0.125, 30.0, 2.0\n0.375, -90.0,\n")
            self.assertListEqual(read_angle_track(path), [(0.125, 30.0, 2.0), (0.375, -90.0, None)])
            path.write_text("t, bearing\n0.125, 30.0\n")
            with self.assertRaises(ValueError):
                read_angle_track(path)


if __name__ == '__main__':
    unittest.main()
