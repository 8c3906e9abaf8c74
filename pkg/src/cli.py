"""Command line: distill | train | infer | eval-synthetic | replay."""
import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import backends, formats, inference, keypoints, metrics, policy
from .config import DEFAULT_REPORT_CSV, Settings, load_settings
from .data import load_skill_dir
from .errors import (
    AllKeypointsNull,
    BackendError,
    ConfigError,
    DistillationFailed,
    FormatError,
    InferenceFailed,
    KeypointSkillError,
    ParseError,
)
from .features import build_provider, featurize_image
from .planner import read_world
from .synthetic import SCENARIO_KINDS, VARIATIONS

logger = logging.getLogger("src.cli")

EXIT_OK = 0
EXIT_TASK_FAILED = 1
EXIT_USAGE = 2
EXIT_BACKEND = 3

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
SCENE_STEM = "obs"
SCENARIO_FILE = "scenario.json"


def _client_for(args: argparse.Namespace, settings: Settings, directory: Optional[Path]) -> backends.CompletionClient:
    scenario = args.scenario
    if scenario is None and args.backend == "scripted" and directory is not None and (directory / SCENARIO_FILE).exists():
        scenario = directory / SCENARIO_FILE
    return backends.build_client(args.backend, settings.backend, scenario=scenario, replay=getattr(args, "replay", None))


def _run_distill(args: argparse.Namespace, settings: Settings, client: backends.CompletionClient) -> int:
    bundle, _ = load_skill_dir(args.skill)
    transcript = backends.BackendTranscript()
    try:
        skill = inference.distill_bundle(bundle, client, settings, transcript)
    finally:
        if args.transcript_out is not None:
            transcript.save(args.transcript_out)
            logger.info("Transcript written to %s (%d records)", args.transcript_out, len(transcript))
    keypoints.save_skill(args.out, skill)
    logger.info("Distilled %d keypoints in %s round(s) -> %s", len(skill.keypoints), skill.provenance.get("rounds"), args.out)
    return EXIT_OK


def cmd_distill(args: argparse.Namespace, settings: Settings) -> int:
    return _run_distill(args, settings, _client_for(args, settings, args.skill))


def cmd_replay(args: argparse.Namespace, settings: Settings) -> int:
    client = backends.ReplayClient(backends.BackendTranscript.load(args.transcript))
    return _run_distill(args, settings, client)


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    skill = keypoints.load_skill(args.skill)
    bundle, _ = load_skill_dir(args.demos)
    _, demo_scenes = inference.featurize_bundle(bundle, settings)
    pairs = inference.training_pairs(skill, demo_scenes, bundle, settings)
    params = policy.train(pairs, settings.train)
    policy.save_params(args.out, params)
    report = params.loss_report
    logger.info(
        "Trained on %d demonstrations: loss %.4f -> %.4f; checkpoint %s",
        len(pairs), report["initial_loss"], report["final_loss"], args.out,
    )
    return EXIT_OK


def cmd_infer(args: argparse.Namespace, settings: Settings) -> int:
    params = policy.load_params(args.model)
    skill = keypoints.load_skill(args.skill)
    world = read_world(args.world)
    image = formats.read_rgbd(args.scene / SCENE_STEM)
    provider = build_provider(settings.features, args.scene / "features")
    scene = featurize_image(image, provider, settings.features)

    weights = None
    if args.backend is not None:
        client = _client_for(args, settings, args.scene)
        weights = inference.coarse_weights(scene, client, args.description, settings)

    plan = inference.infer(scene, skill, params, world, settings, mask_weights=weights)
    inference.write_plan(args.out, plan)
    logger.info("Plan written to %s (sample %d, %d approach waypoints)", args.out, plan.chosen_index, len(plan.approach))
    return EXIT_OK


def run_eval(
    seed: int, n_tasks: int, settings: Settings, scenario: str = "consistent", workers: int = 1
) -> List[inference.TaskResult]:
    """Evaluate tasks seed..seed+n_tasks-1; each task carries its own seed so order is irrelevant."""
    indices = list(range(n_tasks))
    if workers <= 1:
        return [inference.evaluate_synthetic_task(i, seed, settings, scenario) for i in indices]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(inference.evaluate_synthetic_task, i, seed, settings, scenario) for i in indices]
        return [f.result() for f in futures]


def cmd_eval_synthetic(args: argparse.Namespace, settings: Settings) -> int:
    if args.variation is not None:
        settings = replace(settings, synthetic=replace(settings.synthetic, variation=args.variation))
    if args.demos is not None:
        settings = replace(settings, synthetic=replace(settings.synthetic, n_demos=args.demos))
    results = run_eval(args.seed, args.n_tasks, settings, args.scenario, args.workers)
    frame = metrics.results_frame(results)

    args.report.parent.mkdir(parents=True, exist_ok=True)
    args.report.write_text(metrics.format_report(frame), encoding="utf-8")
    csv_path = args.report.with_suffix(".csv")
    frame.to_csv(csv_path, index=False)
    logger.info("Report written to %s and %s", args.report, csv_path)
    kpis = metrics.summary_kpis(frame)
    return EXIT_OK if kpis["success_rate"] > 0 else EXIT_TASK_FAILED


def _add_backend_args(parser: argparse.ArgumentParser, required: bool) -> None:
    parser.add_argument("--backend", choices=["scripted", "remote", "replay"], required=required)
    parser.add_argument("--scenario", type=Path, help="Scripted backend scenario (default: scenario.json in the skill or scene directory)")
    parser.add_argument("--replay", type=Path, help="Transcript to answer from with --backend replay")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keypoint-skill", description="Distill keypoint skills and plan with them")
    parser.add_argument("--config", type=Path, help="TOML config file")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    distill = sub.add_parser("distill", help="Distill keypoints from a skill dataset directory")
    distill.add_argument("--skill", type=Path, required=True)
    _add_backend_args(distill, required=True)
    distill.add_argument("--out", type=Path, required=True)
    distill.add_argument("--transcript-out", type=Path)
    distill.set_defaults(handler=cmd_distill)

    replay = sub.add_parser("replay", help="Re-run distillation from a saved transcript")
    replay.add_argument("--transcript", type=Path, required=True)
    replay.add_argument("--skill", type=Path, required=True)
    replay.add_argument("--out", type=Path, required=True)
    replay.add_argument("--transcript-out", type=Path)
    replay.set_defaults(handler=cmd_replay)

    train = sub.add_parser("train", help="Train the trajectory denoiser")
    train.add_argument("--skill", type=Path, required=True, help="Distilled skill (.kskill)")
    train.add_argument("--demos", type=Path, required=True, help="Skill dataset directory")
    train.add_argument("--out", type=Path, required=True)
    train.set_defaults(handler=cmd_train)

    infer = sub.add_parser("infer", help="Plan in a new scene")
    infer.add_argument("--scene", type=Path, required=True, help="Directory holding obs.{ppm,kdep,cam}")
    infer.add_argument("--skill", type=Path, required=True)
    infer.add_argument("--model", type=Path, required=True)
    infer.add_argument("--world", type=Path, required=True)
    infer.add_argument("--out", type=Path, required=True)
    infer.add_argument("--description", default="", help="Task description for coarse region proposal")
    _add_backend_args(infer, required=False)
    infer.set_defaults(handler=cmd_infer)

    evaluate = sub.add_parser("eval-synthetic", help="Generate, distill, train and infer on synthetic tasks")
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument("--n-tasks", type=int, default=20)
    evaluate.add_argument("--report", type=Path, default=DEFAULT_REPORT_CSV.with_suffix(".txt"))
    evaluate.add_argument("--variation", choices=list(VARIATIONS))
    evaluate.add_argument("--scenario", choices=list(SCENARIO_KINDS), default="consistent")
    evaluate.add_argument("--demos", type=int, help="Demonstrations per task")
    evaluate.add_argument("--workers", type=int, default=1)
    evaluate.set_defaults(handler=cmd_eval_synthetic)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (DistillationFailed, InferenceFailed, AllKeypointsNull)):
        return EXIT_TASK_FAILED
    if isinstance(exc, (BackendError, ParseError)):
        return EXIT_BACKEND
    if isinstance(exc, (ConfigError, FormatError, FileNotFoundError)):
        return EXIT_USAGE
    if isinstance(exc, KeypointSkillError):
        return EXIT_TASK_FAILED
    # argument validation outside the error hierarchy (bad provider name, weights out of range)
    if isinstance(exc, ValueError):
        return EXIT_USAGE
    return EXIT_TASK_FAILED


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        settings = load_settings(args.config)
        return args.handler(args, settings)
    except (KeypointSkillError, FileNotFoundError, ValueError) as exc:
        code = exit_code_for(exc)
        logger.error("%s failed: %s", args.command, exc)
        for verdict in getattr(exc, "diagnostics", []):
            logger.error("  %s", verdict)
        return code


if __name__ == "__main__":
    sys.exit(main())
