"""End-to-end runtime: phase segmentation, training-set assembly, inference and synthetic evaluation."""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import backends, formats, keypoints, policy, synthetic
from .config import EVAL_DETECTION_TOLERANCE, DetectionConfig, ProposalConfig, Settings
from .data import SkillBundle
from .errors import (
    AllKeypointsNull,
    ConfigError,
    DistillationFailed,
    GoalInCollision,
    InferenceFailed,
    OutOfWorkspace,
    StartInCollision,
)
from .features import FeaturedScene, build_provider, featurize_image
from .geometry import project_to_rotation, rot6d_decode, rot6d_encode
from .keypoints import DetectionResult, DistilledSkill
from .planner import PlannerConfig, SceneWorld, birrt_plan, path_length
from .policy import ConditionSet, DenoiserParams, TrajectorySample

logger = logging.getLogger(__name__)


# Phases -----------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseSplit:
    approach: np.ndarray
    execution: np.ndarray
    split_index: int
    warning: bool = False


def segment_phases(trajectory: np.ndarray, keypoint_positions: np.ndarray, threshold: float) -> PhaseSplit:
    """Execution starts at the first pose within `threshold` of its nearest keypoint."""
    if threshold <= 0:
        raise ValueError("Phase threshold must be positive.")
    trajectory = np.asarray(trajectory, dtype=np.float64)
    kps = np.asarray(keypoint_positions, dtype=np.float64).reshape(-1, 3)
    if len(kps) == 0:
        raise ValueError("Phase segmentation needs at least one keypoint.")
    dist = np.linalg.norm(trajectory[:, None, 0:3] - kps[None, :, :], axis=2).min(axis=1)
    close = np.flatnonzero(dist <= threshold)
    if len(close) == 0:
        logger.warning("No pose comes within %.3f m of a keypoint; using the whole trajectory as execution", threshold)
        return PhaseSplit(trajectory[:0], trajectory, 0, warning=True)
    split = int(close[0])
    return PhaseSplit(trajectory[:split], trajectory[split:], split)


# Scenes and sessions ----------------------------------------------------------


def featurize_bundle(bundle: SkillBundle, settings: Settings) -> Tuple[FeaturedScene, List[FeaturedScene]]:
    """Featured seed frame and one featured scene per demonstration."""
    provider = build_provider(settings.features, bundle.feature_dir)
    seed = featurize_image(bundle.seed_frame, provider, settings.features)
    demos = [featurize_image(d.observation, provider, settings.features) for d in bundle.demos]
    return seed, demos


def mask_generator_for(bundle: SkillBundle) -> backends.MaskGenerator:
    if bundle.seed_labels is not None:
        return backends.LabelMapMaskGenerator(bundle.seed_labels)
    if bundle.mask_dir is not None and bundle.mask_dir.is_dir():
        return backends.FileMaskGenerator(bundle.mask_dir)
    raise ConfigError("Skill has no mask source (segmentation/frame_0000_labels.png or masks/index.json)")


def make_session(
    bundle: SkillBundle,
    client: backends.CompletionClient,
    config: ProposalConfig,
    transcript: Optional[backends.BackendTranscript] = None,
) -> backends.ProposalSession:
    return backends.ProposalSession(
        bundle.seed_frame,
        [frame.color for frame in bundle.video],
        bundle.description,
        client,
        mask_generator_for(bundle),
        config,
        transcript,
    )


def distill_bundle(
    bundle: SkillBundle,
    client: backends.CompletionClient,
    settings: Settings,
    transcript: Optional[backends.BackendTranscript] = None,
) -> DistilledSkill:
    seed, demos = featurize_bundle(bundle, settings)
    session = make_session(bundle, client, settings.proposal, transcript)
    return keypoints.distill(seed, demos, session, settings.distill, settings.detection)


# Training set -----------------------------------------------------------------


def training_pairs(
    skill: DistilledSkill,
    demo_scenes: Sequence[FeaturedScene],
    bundle: SkillBundle,
    settings: Settings,
) -> List[Tuple[ConditionSet, TrajectorySample]]:
    """One (condition, object-relative execution) pair per demonstration with any matched keypoint."""
    ids = skill.keypoint_ids
    pairs = []
    for i, (scene, demo) in enumerate(zip(demo_scenes, bundle.demos)):
        matched = skill.matches.get(i, {})
        if not matched:
            logger.warning("Demonstration %d has no matched keypoints; skipped", i)
            continue
        found = {}
        for kid, position in matched.items():
            idx = keypoints.nearest_index(scene, position)
            found[kid] = (np.asarray(position), scene.field.visual[idx], scene.field.geometric[idx])
        condition = policy.build_condition(ids, found)
        split = segment_phases(demo.trajectory, np.array(list(matched.values())), settings.infer.phase_threshold)
        execution = split.execution if len(split.execution) >= 2 else demo.trajectory
        world = TrajectorySample(policy.resample_trajectory(execution, settings.train.horizon))
        pairs.append((condition, policy.to_object_frame(world, np.array([found[k][0] for k in sorted(found)]))))
    if not pairs:
        raise DistillationFailed("No demonstration has a matched keypoint to train on.", reason="no_training_data")
    return pairs


# Inference --------------------------------------------------------------------


def detect_keypoints(
    skill: DistilledSkill,
    scene: FeaturedScene,
    config: DetectionConfig = DetectionConfig(),
    mask_weights: Optional[np.ndarray] = None,
) -> Dict[str, DetectionResult]:
    return {k.id: keypoints.detect(k, scene, mask_weights, config) for k in sorted(skill.keypoints, key=lambda k: k.id)}


def condition_from_detections(skill: DistilledSkill, scene: FeaturedScene, results: Dict[str, DetectionResult]) -> ConditionSet:
    found = {
        kid: (r.position, scene.field.visual[r.index], scene.field.geometric[r.index])
        for kid, r in results.items()
        if r.matched
    }
    if not found:
        raise AllKeypointsNull("None of the skill's keypoints was found in the scene.")
    return policy.build_condition(skill.keypoint_ids, found)


@dataclass
class SampleVerdict:
    index: int
    feasible: bool
    reason: str
    goal: List[float]
    path_length: float = 0.0


@dataclass
class InferencePlan:
    approach: np.ndarray  # (M, 10) world poses, last row equals execution[0]
    execution: TrajectorySample
    chosen_index: int
    diagnostics: List[SampleVerdict]
    samples: List[TrajectorySample] = field(default_factory=list)
    detections: Dict[str, DetectionResult] = field(default_factory=dict)


def approach_poses(path: Sequence[np.ndarray], start_rotation: np.ndarray, execution_start: np.ndarray) -> np.ndarray:
    """Waypoints with orientation blended by path length from the start to the execution start."""
    positions = np.asarray(path, dtype=np.float64)
    seg = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    w = s / s[-1] if s[-1] > 0 else np.ones_like(s)
    end_rotation = rot6d_decode(execution_start[3:9])
    blended = (1 - w)[:, None, None] * start_rotation + w[:, None, None] * end_rotation
    poses = np.empty((len(positions), policy.POSE_DIM))
    poses[:, 0:3] = positions
    poses[:, 3:9] = rot6d_encode(project_to_rotation(blended))
    poses[:, 9] = execution_start[9]
    poses[-1] = execution_start
    return poses


def select_feasible(
    candidates: Sequence[TrajectorySample],
    start: np.ndarray,
    world: SceneWorld,
    config: PlannerConfig,
) -> Tuple[Optional[int], Optional[List[np.ndarray]], List[SampleVerdict]]:
    """Plan to each candidate's first pose in order; stop at the first reachable one."""
    verdicts: List[SampleVerdict] = []
    for i, traj in enumerate(candidates):
        goal = traj.poses[0, 0:3]
        try:
            path = birrt_plan(start, goal, world, config)
        except GoalInCollision:
            verdicts.append(SampleVerdict(i, False, "goal_in_collision", goal.tolist()))
            continue
        except OutOfWorkspace:
            verdicts.append(SampleVerdict(i, False, "out_of_workspace", goal.tolist()))
            continue
        if path is None:
            verdicts.append(SampleVerdict(i, False, "no_path", goal.tolist()))
            continue
        verdicts.append(SampleVerdict(i, True, "ok", goal.tolist(), path_length(path)))
        return i, path, verdicts
    return None, None, verdicts


def infer(
    scene: FeaturedScene,
    skill: DistilledSkill,
    params: DenoiserParams,
    world: SceneWorld,
    settings: Settings = Settings(),
    start_rotation: Optional[np.ndarray] = None,
    mask_weights: Optional[np.ndarray] = None,
) -> InferencePlan:
    """
    Detect the skill's keypoints, sample execution trajectories and return the first
    one whose start the planner can reach from the configured start position.
    """
    start = np.asarray(settings.infer.start_position, dtype=np.float64)
    if not world.in_bounds(start)[0]:
        raise OutOfWorkspace(f"start {start} is outside the workspace bounds.")
    if world.in_collision(start)[0]:
        raise StartInCollision(f"start {start} lies inside an obstacle.")

    results = detect_keypoints(skill, scene, settings.detection, mask_weights)
    matched = sum(r.matched for r in results.values())
    logger.info("Detected %d/%d keypoints in %s", matched, len(results), scene.name or "scene")
    condition = condition_from_detections(skill, scene, results)

    relative = policy.sample(params, condition, settings.infer.n_samples, settings.infer.seed)
    candidates = [policy.to_world_frame(s) for s in relative]
    index, path, verdicts = select_feasible(candidates, start, world, settings.planner)
    for verdict in verdicts:
        logger.info("Sample %d: %s", verdict.index, verdict.reason)
    if index is None:
        raise InferenceFailed(
            f"None of the {len(candidates)} sampled trajectories is reachable.", reason="exhausted", diagnostics=verdicts
        )

    execution = candidates[index]
    rotation = start_rotation if start_rotation is not None else rot6d_decode(execution.poses[0, 3:9])
    return InferencePlan(
        approach=approach_poses(path, rotation, execution.poses[0]),
        execution=execution,
        chosen_index=index,
        diagnostics=verdicts,
        samples=candidates,
        detections=results,
    )


def coarse_weights(
    scene: FeaturedScene,
    client: backends.CompletionClient,
    description: str,
    settings: Settings,
) -> np.ndarray:
    """Point weights from a region proposal on the new scene."""
    if scene.image is None or scene.cloud.pixels is None:
        raise ValueError("Coarse region weights need the scene's source image.")
    proposer = backends.VLMRegionProposer(client, backends.BackendTranscript(), settings.proposal.parse_retries)
    return backends.coarse_region_weights(
        scene.image, scene.cloud.pixels, proposer, description, settings.proposal, settings.detection.mask_discount
    )


def write_plan(path: Path, plan: InferencePlan) -> None:
    """Plan CSV (approach rows then execution rows) plus a JSON sidecar with the verdicts."""
    path = Path(path)
    poses = np.concatenate([plan.approach, plan.execution.poses])
    formats.write_trajectory(path, poses)
    sidecar = {
        "approach_length": len(plan.approach),
        "execution_length": plan.execution.horizon,
        "chosen_index": plan.chosen_index,
        "diagnostics": [asdict(v) for v in plan.diagnostics],
        "detections": {
            kid: {"matched": r.matched, "score": r.score, "reason": None if r.matched else r.null_reason.value}
            for kid, r in plan.detections.items()
        },
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n", encoding="utf-8")


# Synthetic evaluation ---------------------------------------------------------


@dataclass
class TaskResult:
    task: int
    seed: int
    variation: str
    rounds: int = 0
    keypoints: int = 0
    detection_rate: float = 0.0
    endpoint_error: float = float("nan")
    endpoint_error_fraction: float = float("nan")
    plan_feasible: bool = False
    chosen_index: int = -1
    status: str = "ok"
    seconds: float = 0.0


def detection_success(
    task: synthetic.SyntheticTask, skill: DistilledSkill, held: synthetic.SyntheticScene, results: Dict[str, DetectionResult]
) -> float:
    """Fraction of keypoints found within tolerance of where the same handle point sits in the new scene."""
    if not results:
        return 0.0
    hits = 0
    for kid, result in results.items():
        if not result.matched:
            continue
        expected = synthetic.corresponding_point(task, skill.keypoint(kid).ref_position, held)
        if np.linalg.norm(result.position - expected) <= EVAL_DETECTION_TOLERANCE:
            hits += 1
    return hits / len(results)


def evaluate_synthetic_task(task_index: int, seed: int, settings: Settings, scenario: str = "consistent") -> TaskResult:
    """generate -> distill (scripted) -> train -> infer on a held-out scene."""
    started = time.perf_counter()
    task_seed = seed + task_index
    task = synthetic.generate_synthetic_task(task_seed, settings.synthetic)
    result = TaskResult(task=task_index, seed=task_seed, variation=task.variation)

    held = synthetic.held_out_scene(task)
    entries = backends.scenario_from_list(
        synthetic.build_synthetic_scenario(task, scenario, settings.proposal, held_out=held)
    )
    client = backends.ScriptedClient(entries)
    seed_scene, demo_scenes = featurize_bundle(task.bundle, settings)
    session = make_session(task.bundle, client, settings.proposal)
    try:
        skill = keypoints.distill(seed_scene, demo_scenes, session, settings.distill, settings.detection)
    except DistillationFailed as exc:
        result.status = f"distill_failed: {exc.reason}"
        result.seconds = time.perf_counter() - started
        return result
    result.rounds = int(skill.provenance.get("rounds", 0))
    result.keypoints = len(skill.keypoints)

    params = policy.train(training_pairs(skill, demo_scenes, task.bundle, settings), settings.train)

    provider = build_provider(settings.features)
    scene = featurize_image(held.image, provider, settings.features)
    weights = coarse_weights(scene, client, task.bundle.description, settings)
    try:
        plan = infer(scene, skill, params, held.world, settings, mask_weights=weights)
    except AllKeypointsNull:
        result.status = "all_keypoints_null"
    except InferenceFailed as exc:
        result.status = f"infer_failed: {exc.reason}"
        result.detection_rate = detection_success(task, skill, held, detect_keypoints(skill, scene, settings.detection, weights))
    else:
        result.detection_rate = detection_success(task, skill, held, plan.detections)
        error = float(np.linalg.norm(plan.execution.poses[-1, 0:3] - held.truth.execution_world[-1, 0:3]))
        result.endpoint_error = error
        result.endpoint_error_fraction = error / held.world.scale
        result.plan_feasible = True
        result.chosen_index = plan.chosen_index
    result.seconds = time.perf_counter() - started
    logger.info(
        "Task %d (seed %d): %d keypoints, detection %.2f, endpoint error %.3f m, feasible %s",
        task_index, task_seed, result.keypoints, result.detection_rate, result.endpoint_error, result.plan_feasible,
    )
    return result
