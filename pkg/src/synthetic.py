"""Procedural tabletop tasks: a handled box on a table, rendered to RGBD, with ground truth.

Each scene is ray-cast from a pinhole camera. Surface colour is a function of the
position on the part in the part's own frame, so the same physical point carries the
same colour in every scene of a task.
"""
import colorsys
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import backends, data
from .config import START_POSITION, ProposalConfig, SyntheticConfig
from .data import Demonstration, SkillBundle
from .geometry import Camera, CameraIntrinsics, RGBDImage, RigidTransform, look_at, rot6d_encode, yaw_rotation
from .planner import Box, SceneWorld, write_world

logger = logging.getLogger(__name__)

BACKGROUND, TABLE, BODY, HANDLE, DISTRACTOR, GRIPPER = range(6)
PART_NAMES = {BACKGROUND: "background", TABLE: "table", BODY: "body", HANDLE: "handle", DISTRACTOR: "distractor", GRIPPER: "gripper"}
VARIATIONS = ("pose", "view", "instance", "all")

TABLE_HALF = 0.6
WORKSPACE_HEIGHT = 0.8
BODY_HALF = np.array([0.08, 0.06, 0.07])
HANDLE_HALF = np.array([0.06, 0.025, 0.015])
HANDLE_HEIGHT_FRACTION = 0.607
DISTRACTOR_HALF = np.array([0.04, 0.04, 0.05])
GRIPPER_HALF = np.array([0.02, 0.02, 0.02])
MAX_YAW = 0.35
MAX_SHIFT = 0.08
INSTANCE_SCALE = 0.15
CAMERA_TARGET = np.array([0.0, 0.02, 0.06])
CAMERA_DISTANCE = 0.7
CAMERA_ELEVATION = 0.6
FOCAL = 140.0

# keypoints on the handle, in handle-normalised coordinates (0..1 per axis; y=0 is the front face)
HANDLE_KEYPOINTS = np.array(
    [
        [0.5, 0.0, 0.5],
        [0.5, 0.0, 1.0],
        [0.15, 0.0, 0.5],
        [0.85, 0.0, 0.5],
        [0.5, 0.5, 1.0],
    ]
)
# end-effector frame in the object frame: approach axis along +y
GRASP_ROTATION = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
DESCRIPTION = "Grasp the handle of the box and pull it toward the robot."


# Rendering --------------------------------------------------------------------


@dataclass(frozen=True)
class Solid:
    center: np.ndarray
    rotation: np.ndarray  # local -> world
    half: np.ndarray
    label: int
    colorize: Callable[[np.ndarray], np.ndarray]  # normalised local coords (n, 3) -> rgb (n, 3)


def _constant(rgb: Sequence[float]) -> Callable[[np.ndarray], np.ndarray]:
    color = np.asarray(rgb, dtype=np.float64)
    return lambda n: np.tile(color, (len(n), 1))


def _handle_colors(n: np.ndarray) -> np.ndarray:
    return np.column_stack([240 - 100 * n[:, 1], 40 + 180 * n[:, 0], 40 + 180 * n[:, 2]])


def _body_colors(n: np.ndarray) -> np.ndarray:
    return np.column_stack([50 + 30 * n[:, 1], 60 + 120 * n[:, 0], 150 + 80 * n[:, 2]])


def make_camera(eye: np.ndarray, target: np.ndarray, width: int, height: int) -> Camera:
    intrinsics = CameraIntrinsics(FOCAL, FOCAL, (width - 1) / 2, (height - 1) / 2)
    return Camera(intrinsics, look_at(eye, target))


def render(camera: Camera, solids: Sequence[Solid], width: int, height: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-cast oriented boxes. Returns (color uint8, depth float32, part labels uint8)."""
    k = camera.intrinsics
    vs, us = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    rays_cam = np.stack([(us.ravel() - k.cx) / k.fx, (vs.ravel() - k.cy) / k.fy, np.ones(us.size)], axis=1)
    dirs = rays_cam @ camera.extrinsic.rotation.T
    origin = camera.origin

    best_t = np.full(len(dirs), np.inf)
    best_solid = np.full(len(dirs), -1)
    for i, solid in enumerate(solids):
        o_local = solid.rotation.T @ (origin - solid.center)
        d_local = dirs @ solid.rotation
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d_local
            t1 = (-solid.half - o_local) * inv
            t2 = (solid.half - o_local) * inv
        t_near = np.nanmax(np.fmin(t1, t2), axis=1)
        t_far = np.nanmin(np.fmax(t1, t2), axis=1)
        hit = (t_far >= t_near) & (t_near > 1e-6) & (t_near < best_t)
        best_t[hit] = t_near[hit]
        best_solid[hit] = i

    color = np.full((len(dirs), 3), 20.0)
    labels = np.zeros(len(dirs), dtype=np.uint8)
    for i, solid in enumerate(solids):
        sel = best_solid == i
        if not np.any(sel):
            continue
        local = (origin + best_t[sel, None] * dirs[sel] - solid.center) @ solid.rotation
        normalised = np.clip((local + solid.half) / (2 * solid.half), 0.0, 1.0)
        color[sel] = solid.colorize(normalised)
        labels[sel] = solid.label

    depth = np.where(np.isfinite(best_t), best_t, 0.0).astype(np.float32)
    return (
        np.round(color).clip(0, 255).astype(np.uint8).reshape(height, width, 3),
        depth.reshape(height, width),
        labels.reshape(height, width),
    )


# Scene sampling ---------------------------------------------------------------


@dataclass(frozen=True)
class ObjectInstance:
    pose: RigidTransform  # object -> world
    body_half: np.ndarray
    handle_half: np.ndarray

    @property
    def handle_center(self) -> np.ndarray:
        return np.array(
            [0.0, -(self.body_half[1] + self.handle_half[1]), 2 * self.body_half[2] * HANDLE_HEIGHT_FRACTION]
        )

    def handle_point(self, normalised: np.ndarray) -> np.ndarray:
        """Object-frame point from handle-normalised coordinates."""
        return self.handle_center + (2 * np.asarray(normalised) - 1) * self.handle_half

    @property
    def keypoints_object(self) -> np.ndarray:
        return np.array([self.handle_point(n) for n in HANDLE_KEYPOINTS])

    @property
    def keypoints_world(self) -> np.ndarray:
        return self.pose.apply(self.keypoints_object)

    @property
    def grasp_point(self) -> np.ndarray:
        return self.handle_point(HANDLE_KEYPOINTS[0])

    def solids(self) -> List[Solid]:
        rot = self.pose.rotation
        body_center = np.array([0.0, 0.0, self.body_half[2]])
        return [
            Solid(self.pose.apply(body_center), rot, self.body_half, BODY, _body_colors),
            Solid(self.pose.apply(self.handle_center), rot, self.handle_half, HANDLE, _handle_colors),
        ]

    def obstacle_boxes(self) -> List[Box]:
        boxes = []
        for center, half in (
            (np.array([0.0, 0.0, self.body_half[2]]), self.body_half),
            (self.handle_center, self.handle_half),
        ):
            corners = center + half * np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
            world = self.pose.apply(corners)
            boxes.append(Box(world.min(axis=0), world.max(axis=0)))
        return boxes


@dataclass(frozen=True)
class SceneTruth:
    instance: ObjectInstance
    camera: Camera
    distractor_center: np.ndarray
    distractor_color: Tuple[int, int, int]
    execution_object: np.ndarray  # canonical execution poses, object frame
    execution_world: np.ndarray
    trajectory_world: np.ndarray  # approach + execution
    approach_length: int

    @property
    def keypoints_world(self) -> np.ndarray:
        return self.instance.keypoints_world


@dataclass(frozen=True)
class SyntheticScene:
    image: RGBDImage
    labels: np.ndarray
    truth: SceneTruth
    world: SceneWorld


def _flags(variation: str) -> Dict[str, bool]:
    if variation not in VARIATIONS:
        raise ValueError(f"Unknown variation '{variation}' (expected one of {', '.join(VARIATIONS)})")
    return {name: variation in (name, "all") for name in ("pose", "view", "instance")}


def sample_instance(rng: np.random.Generator, variation: str) -> ObjectInstance:
    flags = _flags(variation)
    yaw = rng.uniform(-MAX_YAW, MAX_YAW) if flags["pose"] else 0.0
    shift = rng.uniform(-MAX_SHIFT, MAX_SHIFT, size=2) if flags["pose"] else np.zeros(2)
    if flags["instance"]:
        body = BODY_HALF * rng.uniform(1 - INSTANCE_SCALE, 1 + INSTANCE_SCALE, size=3)
        handle = HANDLE_HALF * rng.uniform(1 - INSTANCE_SCALE, 1 + INSTANCE_SCALE, size=3)
    else:
        body, handle = BODY_HALF.copy(), HANDLE_HALF.copy()
    return ObjectInstance(RigidTransform(yaw_rotation(yaw), np.array([shift[0], shift[1], 0.0])), body, handle)


def sample_camera(rng: np.random.Generator, variation: str, width: int, height: int, jitter: bool = True) -> Camera:
    azimuth, elevation, distance = -np.pi / 2, CAMERA_ELEVATION, CAMERA_DISTANCE
    if jitter and _flags(variation)["view"]:
        azimuth += rng.uniform(-0.2, 0.2)
        elevation = rng.uniform(0.5, 0.75)
        distance = rng.uniform(0.62, 0.78)
    eye = CAMERA_TARGET + distance * np.array(
        [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
    )
    return make_camera(eye, CAMERA_TARGET, width, height)


def canonical_execution(instance: ObjectInstance) -> np.ndarray:
    """Reach the handle, close the gripper, pull outward. Object frame, (T, 10)."""
    g = instance.grasp_point
    legs = [
        (g + [0.0, -0.14, 0.03], g + [0.0, -0.015, 0.0], 12, 1.0, 1.0),
        (g + [0.0, -0.015, 0.0], g + [0.0, -0.005, 0.0], 5, 1.0, 0.0),
        (g + [0.0, -0.005, 0.0], g + [0.0, -0.16, 0.02], 16, 0.0, 0.0),
    ]
    rows = []
    for leg, (a, b, n, grip_a, grip_b) in enumerate(legs):
        s = np.linspace(0.0, 1.0, n)
        if leg:
            s = s[1:]
        positions = a + (b - a) * s[:, None]
        grips = grip_a + (grip_b - grip_a) * s
        rows.append(np.column_stack([positions, np.tile(rot6d_encode(GRASP_ROTATION), (len(s), 1)), grips]))
    return np.concatenate(rows)


def execution_to_world(execution_object: np.ndarray, pose: RigidTransform) -> np.ndarray:
    out = execution_object.copy()
    out[:, 0:3] = pose.apply(execution_object[:, 0:3])
    out[:, 3:9] = rot6d_encode(pose.rotation @ GRASP_ROTATION)
    return out


def sample_scene(
    rng: np.random.Generator,
    variation: str,
    width: int,
    height: int,
    camera_jitter: bool = True,
    gripper_at: Optional[np.ndarray] = None,
) -> SyntheticScene:
    instance = sample_instance(rng, variation)
    camera = sample_camera(rng, variation, width, height, jitter=camera_jitter)
    side = rng.choice([-1.0, 1.0])
    distractor_center = np.array([side * rng.uniform(0.24, 0.28), rng.uniform(0.0, 0.15), DISTRACTOR_HALF[2]])
    hue = rng.uniform(0.2, 0.5)
    distractor_color = tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(hue, 0.85, 0.85))

    execution_object = canonical_execution(instance)
    execution_world = execution_to_world(execution_object, instance.pose)
    approach_length = int(rng.integers(20, 41))
    start = np.asarray(START_POSITION, dtype=np.float64)
    s = np.linspace(0.0, 1.0, approach_length, endpoint=False)[:, None]
    approach = np.tile(execution_world[0], (approach_length, 1))
    approach[:, 0:3] = start + (execution_world[0, 0:3] - start) * s
    trajectory_world = np.concatenate([approach, execution_world])

    solids = [
        Solid(np.array([0.0, 0.0, -0.01]), np.eye(3), np.array([TABLE_HALF, TABLE_HALF, 0.01]), TABLE, _constant((118, 118, 118))),
        *instance.solids(),
        Solid(distractor_center, np.eye(3), DISTRACTOR_HALF, DISTRACTOR, _constant(distractor_color)),
    ]
    if gripper_at is not None:
        solids.append(Solid(np.asarray(gripper_at), np.eye(3), GRIPPER_HALF, GRIPPER, _constant((40, 40, 40))))
    color, depth, labels = render(camera, solids, width, height)

    truth = SceneTruth(
        instance=instance,
        camera=camera,
        distractor_center=distractor_center,
        distractor_color=distractor_color,
        execution_object=execution_object,
        execution_world=execution_world,
        trajectory_world=trajectory_world,
        approach_length=approach_length,
    )
    bounds = Box(np.array([-TABLE_HALF, -TABLE_HALF, 0.0]), np.array([TABLE_HALF, TABLE_HALF, WORKSPACE_HEIGHT]))
    obstacles = instance.obstacle_boxes() + [Box(distractor_center - DISTRACTOR_HALF, distractor_center + DISTRACTOR_HALF)]
    world = SceneWorld(bounds, tuple(Box(np.maximum(b.low, bounds.low), np.minimum(b.high, bounds.high)) for b in obstacles))
    return SyntheticScene(RGBDImage(color, depth, camera), labels, truth, world)


def _rerender_with_gripper(scene: SyntheticScene, position: np.ndarray, width: int, height: int) -> RGBDImage:
    truth = scene.truth
    solids = [
        Solid(np.array([0.0, 0.0, -0.01]), np.eye(3), np.array([TABLE_HALF, TABLE_HALF, 0.01]), TABLE, _constant((118, 118, 118))),
        *truth.instance.solids(),
        Solid(truth.distractor_center, np.eye(3), DISTRACTOR_HALF, DISTRACTOR, _constant(truth.distractor_color)),
        Solid(np.asarray(position), np.eye(3), GRIPPER_HALF, GRIPPER, _constant((40, 40, 40))),
    ]
    color, depth, _ = render(truth.camera, solids, width, height)
    return RGBDImage(color, depth, truth.camera)


# Tasks ------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTask:
    seed: int
    variation: str
    bundle: SkillBundle
    seed_scene: SyntheticScene
    demo_scenes: Tuple[SyntheticScene, ...]
    config: SyntheticConfig = field(default_factory=SyntheticConfig)

    @property
    def world(self) -> SceneWorld:
        return self.seed_scene.world


def quantize(values: np.ndarray) -> np.ndarray:
    """Float32 precision, the precision demonstrations are recorded at."""
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)


def generate_synthetic_task(seed: int, config: SyntheticConfig = SyntheticConfig()) -> SyntheticTask:
    """A skill bundle (seeding video + demonstrations) with full ground truth."""
    rng = np.random.default_rng(seed)
    width, height = config.width, config.height
    seed_scene = sample_scene(rng, config.variation, width, height, camera_jitter=False)
    truth = seed_scene.truth
    frame0 = RGBDImage(seed_scene.image.color, seed_scene.image.depth, seed_scene.image.camera, "frame_0000")
    video = [
        frame0,
        _rerender_with_gripper(seed_scene, truth.execution_world[0, 0:3], width, height),
        _rerender_with_gripper(seed_scene, truth.execution_world[-1, 0:3], width, height),
    ]

    demo_scenes = []
    demos = []
    for i in range(config.n_demos):
        scene = sample_scene(rng, config.variation, width, height)
        demo_scenes.append(scene)
        obs = RGBDImage(scene.image.color, scene.image.depth, scene.image.camera, f"demo_{i:02d}")
        trajectory = quantize(scene.truth.trajectory_world)
        demos.append(Demonstration(obs, trajectory, np.arange(len(trajectory), dtype=np.float64)))

    bundle = SkillBundle(DESCRIPTION, tuple(video), tuple(demos), seed_scene.labels)
    return SyntheticTask(seed, config.variation, bundle, seed_scene, tuple(demo_scenes), config)


def held_out_scene(task: SyntheticTask, index: int = 0) -> SyntheticScene:
    """A fresh scene of the same task family, from its own RNG stream."""
    rng = np.random.default_rng([task.seed, 1_000_003, index])
    scene = sample_scene(rng, task.variation, task.config.width, task.config.height)
    image = RGBDImage(scene.image.color, scene.image.depth, scene.image.camera, f"heldout_{index:02d}")
    return SyntheticScene(image, scene.labels, scene.truth, scene.world)


def seed_object_point(task: SyntheticTask, world_point: np.ndarray) -> np.ndarray:
    """Handle-normalised coordinates of a seed-frame world point."""
    inst = task.seed_scene.truth.instance
    local = inst.pose.inverse().apply(world_point) - inst.handle_center
    return (local / inst.handle_half + 1) / 2


def corresponding_point(task: SyntheticTask, world_point: np.ndarray, scene: SyntheticScene) -> np.ndarray:
    """Where a seed-frame point on the handle sits in another scene of the task."""
    normalised = seed_object_point(task, world_point)
    inst = scene.truth.instance
    return inst.pose.apply(inst.handle_point(normalised))


# Scripted scenarios -----------------------------------------------------------

SCENARIO_KINDS = ("consistent", "adversarial", "all_bad")


def _part_entry(scene: SyntheticScene, part: int, config: ProposalConfig) -> Dict:
    """Scenario entry whose cell puts lattice points on `part` and whose mask index picks it."""
    labels = scene.labels
    height, width = labels.shape
    rects = backends.grid_cells(backends.GridSpec(config.grid_rows, config.grid_cols), width, height)
    counts = {
        label: int(np.sum(labels[r.y0 : r.y1, r.x0 : r.x1] == part)) for label, r in rects.items()
    }
    generator = backends.LabelMapMaskGenerator(labels)
    for label in sorted(counts, key=lambda l: (-counts[l], l)):
        if counts[label] == 0:
            break
        pixels = backends.query_points_for_cells([label], rects, config.query_density)
        masks = backends.nms_masks(generator.generate(scene.image, pixels), config.iou_threshold, config.confidence_floor)
        for index, cand in enumerate(masks):
            u, v = cand.query_pixel
            if labels[v, u] == part:
                return {"cells": [label], "mask_index": index, "object": "box", "part": PART_NAMES[part]}
    raise ValueError(f"No grid cell places a query point on the {PART_NAMES[part]}")


def coarse_region_entry(scene: SyntheticScene, config: ProposalConfig = ProposalConfig()) -> Dict:
    """Inference-round entry naming every grid cell that shows part of the box."""
    labels = scene.labels
    height, width = labels.shape
    rects = backends.grid_cells(backends.GridSpec(config.grid_rows, config.grid_cols), width, height)
    on_box = np.isin(labels, (BODY, HANDLE))
    cells = sorted(label for label, r in rects.items() if on_box[r.y0 : r.y1, r.x0 : r.x1].any())
    if not cells:
        logger.warning("Box not visible in %s; the coarse region covers the whole image", scene.image.name or "scene")
        cells = sorted(rects)
    return {"round": backends.INFERENCE_ROUND, "cells": cells, "object": "box", "part": "box"}


def build_synthetic_scenario(
    task: SyntheticTask,
    kind: str,
    config: ProposalConfig = ProposalConfig(),
    rounds: int = 5,
    held_out: Optional[SyntheticScene] = None,
) -> List[Dict]:
    """
    consistent: the handle in round 1. adversarial: the distractor first, the handle second.
    all_bad: the distractor in every round. With `held_out`, an inference-round entry for
    that scene is appended.
    """
    good = _part_entry(task.seed_scene, HANDLE, config)
    bad = dict(_part_entry(task.seed_scene, DISTRACTOR, config), object="cup")
    if kind == "consistent":
        entries = [good]
    elif kind == "adversarial":
        entries = [bad, good]
    elif kind == "all_bad":
        entries = [bad] * rounds
    else:
        raise ValueError(f"Unknown scenario kind '{kind}' (expected one of {', '.join(SCENARIO_KINDS)})")
    scripted = [dict(entry, round=i + 1) for i, entry in enumerate(entries)]
    if held_out is not None:
        scripted.append(coarse_region_entry(held_out, config))
    return scripted


def write_task(task: SyntheticTask, directory: Path, scenario: str = "consistent", config: ProposalConfig = ProposalConfig()) -> Path:
    """Skill directory plus scenario.json and world.txt for the seed scene."""
    root = data.write_skill_dir(directory, task.bundle)
    entries = build_synthetic_scenario(task, scenario, config)
    (root / "scenario.json").write_text(json.dumps(entries, indent=1) + "\n", encoding="utf-8")
    write_world(root / "world.txt", task.world)
    logger.info("Wrote synthetic task (seed %d, %s) to %s", task.seed, task.variation, root)
    return root
