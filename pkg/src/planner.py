"""Box worlds and bi-directional RRT over end-effector positions."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import PlannerConfig
from .errors import FormatError, GoalInCollision, OutOfWorkspace, StartInCollision

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64).reshape(3)
        high = np.asarray(self.high, dtype=np.float64).reshape(3)
        if np.any(high < low):
            raise ValueError(f"Box corners out of order: {low} / {high}")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.low) & (points <= self.high), axis=1)

    def within(self, other: "Box") -> bool:
        return bool(np.all(self.low >= other.low) and np.all(self.high <= other.high))


@dataclass(frozen=True)
class SceneWorld:
    bounds: Box
    boxes: Tuple[Box, ...] = ()

    def __post_init__(self):
        if np.any(self.bounds.high - self.bounds.low <= 0):
            raise ValueError("Workspace bounds must have positive extent on every axis.")
        for box in self.boxes:
            if not box.within(self.bounds):
                raise ValueError(f"Obstacle {box.low}..{box.high} leaves the workspace bounds.")
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def scale(self) -> float:
        """Workspace diagonal, the yardstick for endpoint errors."""
        return float(np.linalg.norm(self.bounds.high - self.bounds.low))

    def in_bounds(self, points: np.ndarray) -> np.ndarray:
        return self.bounds.contains(points)

    def in_collision(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        hit = np.zeros(len(points), dtype=bool)
        for box in self.boxes:
            hit |= box.contains(points)
        return hit

    def point_free(self, point: np.ndarray) -> bool:
        return bool(self.in_bounds(point)[0] and not self.in_collision(point)[0])

    def segment_free(self, a: np.ndarray, b: np.ndarray, resolution: float) -> bool:
        """True when every point along a-b, checked every `resolution` metres, is free."""
        points = interpolate_segment(a, b, resolution)
        return bool(np.all(self.in_bounds(points)) and not np.any(self.in_collision(points)))


def interpolate_segment(a: np.ndarray, b: np.ndarray, resolution: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    steps = max(1, int(np.ceil(np.linalg.norm(b - a) / resolution)))
    return a + (b - a) * np.linspace(0.0, 1.0, steps + 1)[:, None]


def interpolate_path(path: Sequence[np.ndarray], resolution: float) -> np.ndarray:
    pieces = [interpolate_segment(path[i], path[i + 1], resolution) for i in range(len(path) - 1)]
    return np.concatenate(pieces) if pieces else np.atleast_2d(path[0])


def path_length(path: Sequence[np.ndarray]) -> float:
    return float(sum(np.linalg.norm(np.asarray(path[i + 1]) - np.asarray(path[i])) for i in range(len(path) - 1)))


def read_world(path: Path) -> SceneWorld:
    """
    `bounds x0 y0 z0 x1 y1 z1` once, then one obstacle per line as six numbers
    (min corner, max corner). `#` starts a comment.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"World file not found: {path}")
    bounds: Optional[Box] = None
    boxes: List[Box] = []
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        is_bounds = tokens[0].lower() == "bounds"
        if is_bounds:
            tokens = tokens[1:]
        try:
            values = [float(x) for x in tokens]
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: non-numeric value in {raw!r}") from exc
        if len(values) != 6:
            raise FormatError(f"{path}:{n}: expected 6 numbers, got {len(values)}")
        try:
            box = Box(values[:3], values[3:])
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: {exc}") from exc
        if is_bounds:
            if bounds is not None:
                raise FormatError(f"{path}:{n}: second bounds line")
            bounds = box
        else:
            boxes.append(box)
    if bounds is None:
        raise FormatError(f"{path}: missing bounds line")
    try:
        return SceneWorld(bounds, tuple(boxes))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_world(path: Path, world: SceneWorld) -> None:
    def row(box: Box) -> str:
        return " ".join(repr(float(v)) for v in (*box.low, *box.high))

    lines = [f"bounds {row(world.bounds)}"] + [row(b) for b in world.boxes]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def steer(q_from: np.ndarray, q_to: np.ndarray, step: float) -> np.ndarray:
    vec = q_to - q_from
    dist = np.linalg.norm(vec)
    if dist <= step:
        return q_to.copy()
    return q_from + vec / dist * step


class _Tree:
    def __init__(self, root: np.ndarray, capacity: int):
        self.nodes = np.empty((capacity, 3))
        self.parents = np.full(capacity, -1, dtype=np.int64)
        self.nodes[0] = root
        self.size = 1

    def nearest(self, q: np.ndarray) -> int:
        return int(np.argmin(np.sum((self.nodes[: self.size] - q) ** 2, axis=1)))

    def add(self, q: np.ndarray, parent: int) -> int:
        if self.size == len(self.nodes):
            self.nodes = np.concatenate([self.nodes, np.empty_like(self.nodes)])
            self.parents = np.concatenate([self.parents, np.full_like(self.parents, -1)])
        self.nodes[self.size] = q
        self.parents[self.size] = parent
        self.size += 1
        return self.size - 1

    def branch(self, index: int) -> List[np.ndarray]:
        """Nodes from `index` back to the root."""
        out = []
        while index >= 0:
            out.append(self.nodes[index].copy())
            index = int(self.parents[index])
        return out


def shortcut_smooth(
    path: List[np.ndarray], world: SceneWorld, iterations: int, resolution: float, rng: np.random.Generator
) -> List[np.ndarray]:
    smoothed = list(path)
    for _ in range(iterations):
        if len(smoothed) <= 2:
            break
        i = int(rng.integers(0, len(smoothed) - 2))
        j = int(rng.integers(i + 2, len(smoothed)))
        if world.segment_free(smoothed[i], smoothed[j], resolution):
            smoothed = smoothed[: i + 1] + smoothed[j:]
    return smoothed


def _check_endpoint(point: np.ndarray, world: SceneWorld, which: str) -> None:
    if not world.in_bounds(point)[0]:
        raise OutOfWorkspace(f"{which} {point} is outside the workspace bounds.")
    if world.in_collision(point)[0]:
        error = StartInCollision if which == "start" else GoalInCollision
        raise error(f"{which} {point} lies inside an obstacle.")


def birrt_plan(
    start: np.ndarray, goal: np.ndarray, world: SceneWorld, config: PlannerConfig = PlannerConfig()
) -> Optional[List[np.ndarray]]:
    """
    RRT-Connect from start and goal, then shortcut smoothing. Returns the waypoint list
    (start and goal exact) or None when the trees never meet within the iteration budget.
    """
    start = np.asarray(start, dtype=np.float64).reshape(3)
    goal = np.asarray(goal, dtype=np.float64).reshape(3)
    _check_endpoint(start, world, "start")
    _check_endpoint(goal, world, "goal")
    if world.segment_free(start, goal, config.resolution):
        return [start.copy(), goal.copy()]

    rng = np.random.default_rng(config.seed)
    capacity = min(config.max_iterations, 4096) + 2
    tree_a, tree_b = _Tree(start, capacity), _Tree(goal, capacity)
    a_is_start = True
    low, high = world.bounds.low, world.bounds.high

    for _ in range(config.max_iterations):
        sample = rng.uniform(low, high)
        near = tree_a.nearest(sample)
        new = steer(tree_a.nodes[near], sample, config.step)
        if world.segment_free(tree_a.nodes[near], new, config.resolution):
            new_index = tree_a.add(new, near)
            # connect: keep stepping tree_b toward the new node until blocked or joined
            reached = None
            near_b = tree_b.nearest(new)
            while True:
                q = steer(tree_b.nodes[near_b], new, config.step)
                if not world.segment_free(tree_b.nodes[near_b], q, config.resolution):
                    break
                near_b = tree_b.add(q, near_b)
                if np.array_equal(q, new):
                    reached = near_b
                    break
            if reached is not None:
                half_a = tree_a.branch(new_index)[::-1]
                half_b = tree_b.branch(tree_b.parents[reached])
                path = half_a + half_b if a_is_start else (half_a + half_b)[::-1]
                path[0], path[-1] = start.copy(), goal.copy()
                smoothed = shortcut_smooth(path, world, config.smoothing_iterations, config.resolution, rng)
                logger.debug("biRRT: %d raw waypoints -> %d after smoothing", len(path), len(smoothed))
                return smoothed
        tree_a, tree_b = tree_b, tree_a
        a_is_start = not a_is_start

    logger.info("biRRT: no path after %d iterations", config.max_iterations)
    return None
