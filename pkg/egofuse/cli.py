"""Command line interface.

Each command reads its inputs, writes its outputs in the output directory
with a ``manifest.json`` describing the run, and exits with 0 on success,
1 on a domain error and 2 on a usage error such as a missing input file.
"""

from typing import Any, Callable, Iterable, Sequence, TypeVar
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import metadata
from pathlib import Path
import argparse
import hashlib
import json
import logging
import sys

from .audio_doa import MIC_SUBSETS, AudioClip, ArrayError, DoaEstimate, MicArray, aria_array, read_audio, \
    read_mic_array, segment_starts, srp_phat, write_doa_track
from .audio_range import CalibrationError, RangeCalibration, calibrate_k, read_calibration, write_calibration
from .base import EgofuseError, EgoObservation, Mode, Role, Source
from .config import PipelineConfig, config_to_dict, load_config
from .fusion import FusionError, GlobalMap, build_global_map, dump_map, load_map
from .geometry import CameraTrajectory, GeometryError, read_trajectory
from .metrics import evaluate_doa, evaluate_run, read_angle_track, render_doa_report, render_report, write_items
from .plot import plot_doa, plot_map
from .providers import fetch_descriptor
from .qa import Answer, Question, QaError, read_answers, read_questions, resolve, resolve_direct, write_answers
from .simkit import bundled_scenario, load_scenario, simulate_walkthrough, write_fixture
from .tracks import (AudioFrame, TrackBundle, build_audio_track, calibration_samples, dump_bundle,
                     estimate_audio_frames, filter_seg_confidence, load_bundle, read_seg_tracks, read_snapshot,
                     write_audio_track)

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class UsageError(Exception):
    """Invalid command line, reported with exit status 2."""


def _version() -> str:
    try:
        return metadata.version("egofuse")
    except metadata.PackageNotFoundError:
        return "unknown"


def _require(path: str | Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"No such file or directory: {path}")
    return path


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class Run:
    """State of a command: settings, recorded inputs and outputs."""
    args: argparse.Namespace
    config: PipelineConfig
    out: Path
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    """Questions left without result, with the reason."""

    def input(self, path: str | Path) -> Path:
        """Check and record an input file, or every file of an input directory."""
        path = _require(path)
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for file in files:
            self.inputs[file.as_posix()] = _digest(file)
        return path

    def output(self, name: str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(Path(name).as_posix())
        return path

    def map(self, function: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Apply the function to each item, on ``--jobs`` threads, in order."""
        items = list(items)
        if self.args.jobs <= 1 or len(items) <= 1:
            return [function(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.args.jobs) as pool:
            return list(pool.map(function, items))

    def write_manifest(self) -> None:
        manifest = {
            "command": self.args.argv,
            "version": _version(),
            "seed": self.args.seed,
            "config": config_to_dict(self.config),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": sorted(set(self.outputs)),
            "failed": dict(sorted(self.failed.items())),
        }
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")


# Audio inputs

def _array_and_clip(run: Run, audio: str, mics: str | None, subset: str | None) -> tuple[MicArray, AudioClip]:
    clip = read_audio(run.input(audio))
    array = read_mic_array(run.input(mics)) if mics else aria_array("all", axes=run.config.frame)
    subset = subset or run.config.mics
    if subset != "all":
        indices = MIC_SUBSETS[subset]
        if clip.channel_count == array.count:
            clip = clip.subset(indices)
        array = array.subset(indices)
    if clip.channel_count != array.count:
        raise ArrayError(f"{clip.channel_count} audio channels for {array.count} microphones")
    return array, clip


def _doa_estimates(run: Run, clip: AudioClip, array: MicArray) -> list[DoaEstimate]:
    config = run.config.doa
    starts = segment_starts(clip.duration, config.segment, config.hop)
    results = run.map(lambda start: srp_phat(clip, (start, config.segment), array, config=config), starts)
    return [estimate for estimate in results if estimate is not None]


def _visual_distances(bundle_seg: dict[Role, Any], keyframes: Sequence[EgoObservation],
                      config: PipelineConfig) -> list[EgoObservation]:
    visual = list(keyframes)
    if Role.TARGET in bundle_seg:
        kept = filter_seg_confidence(bundle_seg[Role.TARGET].observations, Role.TARGET, config.fusion.seg)
        visual += [o.observation for o in kept]
    return sorted(visual, key=lambda o: o.t)


def _calibrate(frames: Sequence[AudioFrame], visuals: Iterable[Sequence[EgoObservation]],
               config: PipelineConfig) -> RangeCalibration | None:
    samples: dict[float, tuple[float, float]] = {}
    for visual in visuals:
        for frame, sample in zip(frames, _paired(frames, visual, config)):
            if sample is not None:
                samples.setdefault(frame.doa.t, sample)
    try:
        return calibrate_k(list(samples.values()), config.calibration)
    except CalibrationError as error:
        logger.warning("No range calibration: %s", error)
        return None


def _paired(frames: Sequence[AudioFrame], visual: Sequence[EgoObservation],
            config: PipelineConfig) -> list[tuple[float, float] | None]:
    """Calibration sample of each frame, None where it has none."""
    result: list[tuple[float, float] | None] = []
    for frame in frames:
        sample = calibration_samples([frame], visual, config.calibration.tolerance)
        result.append(sample[0] if sample else None)
    return result


# Fixture stages

def _questions(run: Run, fixture: Path) -> list[Question]:
    return read_questions(run.input(fixture / "questions.jsonl"))


def _trajectory(run: Run, fixture: Path) -> CameraTrajectory:
    return read_trajectory(run.input(fixture / "trajectory.csv"), run.config.frame)


def _build_bundles(run: Run, fixture: Path) -> dict[str, TrackBundle]:
    questions = _questions(run, fixture)
    mics = fixture / "mics.yaml"
    array, clip = _array_and_clip(run, str(fixture / "audio.wav"), str(mics) if mics.exists() else None, None)
    provider = run.config.provider
    if provider.mode == "replay" and provider.fixture_dir is None:
        provider = replace(provider, fixture_dir=str(fixture / "descriptors"))
        run.input(fixture / "descriptors")
    media = (fixture / "audio.wav").as_posix()

    def gather(q: Question) -> tuple[Question, Any, dict[Role, Any]]:
        descriptor = fetch_descriptor(q, media, provider, clip.duration)
        seg_file = fixture / "seg" / f"{q.id}.csv"
        seg = read_seg_tracks(run.input(seg_file)) if seg_file.exists() else {}
        if descriptor.mode is Mode.EGOCENTRIC:
            seg = {role: track for role, track in seg.items() if role is Role.TARGET}
        return q, descriptor, seg

    gathered = run.map(gather, questions)
    frames = estimate_audio_frames(clip, array, run.config.doa, run.config.range)
    calib = _calibrate(frames, (_visual_distances(seg, d.target.keyframes, run.config) for _, d, seg in gathered),
                       run.config)
    if calib is not None:
        write_calibration(calib, run.output("calibration.json"))
    audio = tuple(build_audio_track(clip, array, calib, doa_config=run.config.doa, frames=frames))
    bundles = {}
    for q, descriptor, seg in gathered:
        bundles[q.id] = TrackBundle(descriptor, seg, audio)
        dump_bundle(bundles[q.id], run.output(f"bundles/{q.id}.json"))
    logger.info("Built %d bundles", len(bundles))
    return bundles


def _bundles(run: Run, fixture: Path) -> dict[str, TrackBundle]:
    """Bundles of a previous ``track`` run in the output directory, else built now."""
    directory = run.out / "bundles"
    questions = _questions(run, fixture)
    if directory.is_dir() and all((directory / f"{q.id}.json").is_file() for q in questions):
        return {q.id: load_bundle(run.input(directory / f"{q.id}.json")) for q in questions}
    return _build_bundles(run, fixture)


def _fusion_config(run: Run) -> PipelineConfig:
    if not run.args.sources:
        return run.config
    sources: frozenset[Source] = run.args.sources
    fusion = replace(run.config.fusion, sources=sources)
    return replace(run.config, fusion=fusion, resolver=replace(run.config.resolver, sources=sources))


def _build_maps(run: Run, fixture: Path, plot: bool) -> dict[str, GlobalMap]:
    bundles = _bundles(run, fixture)
    traj = _trajectory(run, fixture)
    config = run.config.fusion

    def build(item: tuple[str, TrackBundle]) -> tuple[str, GlobalMap | None]:
        qid, bundle = item
        try:
            return qid, build_global_map(bundle, traj, config)
        except (FusionError, GeometryError) as error:
            logger.warning("No map for %s: %s", qid, error)
            run.failed[qid] = str(error)
            return qid, None

    maps = {}
    for qid, global_map in run.map(build, sorted(bundles.items())):
        if global_map is None:
            continue
        maps[qid] = global_map
        dump_map(global_map, run.output(f"maps/{qid}.json"))
        if plot:
            plot_map(global_map, run.output(f"maps/{qid}.png"), traj, title=qid)
    return maps


def _maps(run: Run, fixture: Path) -> dict[str, GlobalMap]:
    directory = run.out / "maps"
    if directory.is_dir() and not run.args.sources and any(directory.glob("*.json")):
        return {path.stem: load_map(run.input(path)) for path in sorted(directory.glob("*.json"))}
    return _build_maps(run, fixture, False)


# Commands

def cmd_simulate(run: Run) -> None:
    name = run.args.scenario
    if name.endswith((".yaml", ".yml")):
        scenario = load_scenario(run.input(name))
    else:
        scenario = bundled_scenario(name)
    if run.args.seed is not None:
        scenario = replace(scenario, seed=run.args.seed)
    walkthrough = simulate_walkthrough(scenario)
    write_fixture(walkthrough, run.out)
    run.outputs += [p.relative_to(run.out).as_posix() for p in run.out.rglob("*")
                    if p.is_file() and p.name != "manifest.json"]


def cmd_doa(run: Run) -> None:
    array, clip = _array_and_clip(run, run.args.audio, run.args.mics, run.args.subset)
    estimates = _doa_estimates(run, clip, array)
    write_doa_track(estimates, run.output("doa.csv"))
    if run.args.plot:
        plot_doa(estimates, run.output("doa.png"))


def cmd_range(run: Run) -> None:
    array, clip = _array_and_clip(run, run.args.audio, run.args.mics, run.args.subset)
    frames = estimate_audio_frames(clip, array, run.config.doa, run.config.range)
    if run.args.action == "calibrate":
        keyframes: tuple[EgoObservation, ...] = ()
        if run.args.descriptor:
            descriptor, _ = read_snapshot(run.input(run.args.descriptor))
            keyframes = descriptor.target.keyframes
        seg = read_seg_tracks(run.input(run.args.seg))
        visual = _visual_distances(seg, keyframes, run.config)
        samples = [s for s in _paired(frames, visual, run.config) if s is not None]
        calib = calibrate_k(samples, run.config.calibration)
        write_calibration(calib, run.output("calibration.json"))
    else:
        calib = read_calibration(run.input(run.args.calibration))
        entries = build_audio_track(clip, array, calib, doa_config=run.config.doa, frames=frames)
        write_audio_track(entries, run.output("audio_track.csv"))


def cmd_track(run: Run) -> None:
    _build_bundles(run, run.input(run.args.fixture))


def cmd_map(run: Run) -> None:
    run.config = _fusion_config(run)
    _build_maps(run, run.input(run.args.fixture), run.args.plot)


def cmd_answer(run: Run) -> None:
    run.config = _fusion_config(run)
    fixture = run.input(run.args.fixture)
    questions = _questions(run, fixture)
    answers: list[Answer] = []
    if run.args.direct:
        bundles = _bundles(run, fixture)
        for q in questions:
            try:
                answers.append(resolve_direct(bundles[q.id], q, run.config.resolver))
            except QaError as error:
                logger.warning("Question %s unanswered: %s", q.id, error)
                run.failed[q.id] = str(error)
    else:
        maps = _maps(run, fixture)
        traj = _trajectory(run, fixture)
        for q in questions:
            if q.id not in maps:
                run.failed.setdefault(q.id, "no map")
                continue
            try:
                answers.append(resolve(maps[q.id], q, traj, run.config.resolver))
            except QaError as error:
                logger.warning("Question %s unanswered: %s", q.id, error)
                run.failed[q.id] = str(error)
    write_answers(answers, run.output("answers.jsonl"))


def cmd_eval(run: Run) -> None:
    args = run.args
    if args.doa:
        if not args.truth_track:
            raise UsageError("--doa needs --truth-track")
        truth = [EgoObservation(t, theta, r) for t, theta, r in read_angle_track(run.input(args.truth_track))
                 if r is not None]
        report = evaluate_doa(read_angle_track(run.input(args.doa)), truth, config=run.config.metrics)
        run.output("doa_report.txt").write_text(render_doa_report(report), encoding="utf-8")
        return
    if not (args.questions and args.answers and args.truth):
        raise UsageError("eval needs --questions, --answers and --truth, or --doa and --truth-track")
    questions = read_questions(run.input(args.questions))
    evaluation = evaluate_run(questions, read_answers(run.input(args.answers)), read_answers(run.input(args.truth)),
                              run.config.metrics)
    run.output("report.txt").write_text(render_report(evaluation), encoding="utf-8")
    write_items(evaluation, run.output("items.jsonl"))


def _sources(value: str) -> frozenset[Source]:
    """Argument type of --sources."""
    names = [name.strip().lower() for name in value.split(",") if name.strip()]
    known = {source.value for source in (Source.SD, Source.SEG, Source.AUDIO)}
    unknown = [name for name in names if name not in known]
    if unknown or not names:
        raise argparse.ArgumentTypeError(
            f"expected track sources among {', '.join(sorted(known))}, got {value!r}")
    return frozenset(Source(name) for name in names)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egofuse", description="Spatial reasoning over egocentric recordings.")
    parser.add_argument("--config", action="append", default=[], metavar="PATH",
                        help="YAML configuration, may be repeated; later files override earlier ones")
    parser.add_argument("--seed", type=int, default=None, help="Seed of the simulations")
    parser.add_argument("-o", "--output", default=".", metavar="OUTDIR", help="Output directory")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logs, repeat for debug")
    parser.add_argument("-q", "--quiet", action="store_true", help="Only log errors")
    parser.add_argument("--jobs", type=int, default=1, help="Worker threads for segments and questions")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    simulate = commands.add_parser("simulate", help="Generate a fixture from a scenario")
    simulate.add_argument("scenario", nargs="?", default="moving_speaker",
                          help="Scenario YAML file or bundled scenario name")
    simulate.set_defaults(handler=cmd_simulate)

    def audio_arguments(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("audio", help="Multi-channel WAV file")
        sub.add_argument("--mics", help="Microphone geometry YAML, the Aria array by default")
        sub.add_argument("--subset", choices=sorted(MIC_SUBSETS), help="Microphone subset")

    doa = commands.add_parser("doa", help="Direction of arrival track of a recording")
    audio_arguments(doa)
    doa.add_argument("--plot", action="store_true", help="Also plot the steered power")
    doa.set_defaults(handler=cmd_doa)

    range_ = commands.add_parser("range", help="Distance from the coherent-to-diffuse ratio")
    actions = range_.add_subparsers(dest="action", required=True)
    calibrate = actions.add_parser("calibrate", help="Fit the room constant on visual distances")
    audio_arguments(calibrate)
    calibrate.add_argument("--seg", required=True, help="Segmentation track file of the sounding object")
    calibrate.add_argument("--descriptor", help="Snapshot descriptor with keyframes")
    apply = actions.add_parser("apply", help="Audio track with distances")
    audio_arguments(apply)
    apply.add_argument("--calibration", required=True, help="File written by range calibrate")
    range_.set_defaults(handler=cmd_range)

    track = commands.add_parser("track", help="Gather the egocentric tracks of each question")
    track.add_argument("fixture", help="Fixture directory")
    track.set_defaults(handler=cmd_track)

    for name, handler, description in (("map", cmd_map, "Build the global map of each question"),
                                       ("answer", cmd_answer, "Answer the questions")):
        sub = commands.add_parser(name, help=description)
        sub.add_argument("fixture", help="Fixture directory")
        sub.add_argument("--sources", type=_sources, help="Comma separated track sources among sd, seg, audio")
        sub.set_defaults(handler=handler)
        if name == "map":
            sub.add_argument("--plot", action="store_true", help="Also plot the maps")
        else:
            sub.add_argument("--direct", action="store_true", help="Answer from the egocentric tracks, without map")

    evaluate = commands.add_parser("eval", help="Score answers or a direction track")
    evaluate.add_argument("--questions", help="Questions JSON lines file")
    evaluate.add_argument("--answers", help="Predicted answers JSON lines file")
    evaluate.add_argument("--truth", help="Ground-truth answers JSON lines file")
    evaluate.add_argument("--doa", help="Direction track CSV file")
    evaluate.add_argument("--truth-track", help="Ground-truth direction CSV file")
    evaluate.set_defaults(handler=cmd_eval)
    return parser


def _configure_logging(verbose: int, quiet: bool) -> None:
    if quiet:
        level = logging.ERROR
    else:
        level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", level=level, force=True)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as error:
        return int(error.code or 0)
    args.argv = argv
    _configure_logging(args.verbose, args.quiet)
    if args.jobs < 1:
        logger.error("--jobs must be at least 1")
        return 2
    run = None
    try:
        configs = [_require(path) for path in args.config]
        fixture = getattr(args, "fixture", None)
        if fixture is not None and (Path(fixture) / "config.yaml").is_file():
            configs.insert(0, Path(fixture) / "config.yaml")
        run = Run(args, load_config(*configs), Path(args.output))
        for path in args.config:
            run.input(path)
        args.handler(run)
    except UsageError as error:
        logger.error("%s", error)
        return 2
    except EgofuseError as error:
        logger.error("%s", error)
        if run is not None:
            run.write_manifest()
        return 1
    run.write_manifest()
    return 0
