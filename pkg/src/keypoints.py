"""Keypoint detection, cross-demonstration consistency, and the proposal/verification loop."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .backends import ProposalSession
from .config import DetectionConfig, DistillConfig
from .errors import DistillationFailed, EmptyScene, FormatError, NoMasks
from .features import FeaturedScene, SimilarityWeights, similarity_matrix
from .geometry import farthest_point_sample

logger = logging.getLogger(__name__)

SKILL_FORMAT = "keypoint-skill/1"


@dataclass(frozen=True)
class NeighborRecord:
    offset: np.ndarray
    visual: np.ndarray
    geometric: np.ndarray


@dataclass(frozen=True)
class Keypoint:
    id: str
    ref_position: np.ndarray
    ref_visual: np.ndarray
    ref_geometric: np.ndarray
    neighbor_group: Tuple[NeighborRecord, ...] = ()


class NullReason(str, Enum):
    BELOW_THRESHOLD = "below_threshold"
    NO_CONSENSUS = "no_consensus"
    EMPTY_SCENE = "empty_scene"


@dataclass(frozen=True)
class DetectionResult:
    position: Optional[np.ndarray] = None
    score: float = 0.0
    consensus_fraction: float = 0.0
    index: int = -1
    null_reason: Optional[NullReason] = None

    @property
    def matched(self) -> bool:
        return self.null_reason is None

    @classmethod
    def null(cls, reason: NullReason, score: float = 0.0) -> "DetectionResult":
        return cls(score=score, null_reason=reason)


@dataclass
class CandidateVerdict:
    keypoint_id: str
    detections: List[DetectionResult]
    match_fraction: float
    passed: bool


@dataclass
class ConsistencyReport:
    verdicts: List[CandidateVerdict] = field(default_factory=list)

    @property
    def passing_fraction(self) -> float:
        if not self.verdicts:
            return 0.0
        return sum(v.passed for v in self.verdicts) / len(self.verdicts)


@dataclass
class DistilledSkill:
    keypoints: List[Keypoint]
    matches: Dict[int, Dict[str, np.ndarray]]
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def keypoint_ids(self) -> List[str]:
        return sorted(k.id for k in self.keypoints)

    def keypoint(self, keypoint_id: str) -> Keypoint:
        for k in self.keypoints:
            if k.id == keypoint_id:
                return k
        raise KeyError(keypoint_id)


def _argmax(scores: np.ndarray) -> int:
    """np.argmax already returns the first (lowest) index among ties."""
    return int(np.argmax(scores))


def discount_scores(scores: np.ndarray, mask_weights: np.ndarray) -> np.ndarray:
    """
    Scale positive scores by per-point weights in [0, 1]. Non-positive scores are left
    alone, so a weight below 1 never lifts a point.
    """
    weights = np.asarray(mask_weights, dtype=np.float64)
    if weights.shape != (scores.shape[-1],):
        raise ValueError(f"Expected {scores.shape[-1]} mask weights, got {weights.shape}.")
    if np.any((weights < 0) | (weights > 1)):
        raise ValueError("Mask weights must lie in [0, 1].")
    return np.where(scores > 0, scores * weights, scores)


def detect(
    keypoint: Keypoint,
    scene: FeaturedScene,
    mask_weights: Optional[np.ndarray] = None,
    config: DetectionConfig = DetectionConfig(),
) -> DetectionResult:
    """Best-scoring scene point for the keypoint, confirmed by local-group consensus."""
    if len(scene) == 0:
        raise EmptyScene(f"Scene '{scene.name}' has no points.")
    weights = SimilarityWeights(config.lambda_vis, config.lambda_geo)

    refs_vis = [keypoint.ref_visual]
    refs_geo = [keypoint.ref_geometric]
    group = keypoint.neighbor_group if config.consensus else ()
    for record in group:
        refs_vis.append(record.visual)
        refs_geo.append(record.geometric)
    scores = similarity_matrix(scene.field, np.array(refs_vis), np.array(refs_geo), weights)
    if mask_weights is not None:
        scores = discount_scores(scores, mask_weights)

    best = _argmax(scores[0])
    best_score = float(scores[0, best])
    if best_score < config.tau_sim:
        return DetectionResult.null(NullReason.BELOW_THRESHOLD, best_score)
    candidate = scene.points[best]

    if not group:
        return DetectionResult(candidate.copy(), best_score, 1.0, best)

    votes = 0
    voters = 0
    for row, record in enumerate(group, start=1):
        idx = _argmax(scores[row])
        if scores[row, idx] < config.tau_sim:
            continue
        voters += 1
        if np.linalg.norm(scene.points[idx] - (candidate + record.offset)) <= config.consensus_radius:
            votes += 1
    fraction = votes / voters if voters else 0.0
    if fraction <= 0.5:
        return DetectionResult(score=best_score, consensus_fraction=fraction, index=best, null_reason=NullReason.NO_CONSENSUS)
    return DetectionResult(candidate.copy(), best_score, fraction, best)


def sample_neighbor_group(
    scene: FeaturedScene,
    p0: np.ndarray,
    count: int,
    radius: float,
    rng_seed: int,
) -> Tuple[NeighborRecord, ...]:
    """Uniform sample (no replacement) of in-radius points, excluding p0 itself."""
    if radius <= 0:
        raise ValueError("Neighbour radius must be positive.")
    p0 = np.asarray(p0, dtype=np.float64)
    dist = np.linalg.norm(scene.points - p0, axis=1)
    pool = np.flatnonzero((dist <= radius) & (dist > 0) & scene.usable)
    if len(pool) == 0 or count <= 0:
        return ()
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(pool, size=min(count, len(pool)), replace=False)
    return tuple(
        NeighborRecord(
            offset=scene.points[i] - p0,
            visual=scene.field.visual[i].copy(),
            geometric=scene.field.geometric[i].copy(),
        )
        for i in chosen
    )


def make_keypoint(scene: FeaturedScene, index: int, keypoint_id: str, config: DistillConfig, seed: int) -> Keypoint:
    position = scene.points[index].copy()
    return Keypoint(
        id=keypoint_id,
        ref_position=position,
        ref_visual=scene.field.visual[index].copy(),
        ref_geometric=scene.field.geometric[index].copy(),
        neighbor_group=sample_neighbor_group(scene, position, config.neighbor_count, config.neighbor_radius, seed),
    )


def passes_consistency(matched: int, total: int, delta: float) -> bool:
    """Accept when matched/total >= 1 - delta (with float slack at the boundary)."""
    return matched >= (1.0 - delta) * total - 1e-9


def verify_consistency(
    candidates: Sequence[Keypoint],
    demos: Sequence[FeaturedScene],
    delta: float,
    config: DetectionConfig = DetectionConfig(),
    workers: int = 1,
) -> ConsistencyReport:
    """Detect every candidate in every demonstration scene and apply the acceptance rule."""
    if not demos:
        raise ValueError("Consistency verification needs at least one demonstration.")
    if not 0 <= delta < 1:
        raise ValueError("delta must lie in [0, 1).")

    pairs = [(k, scene) for k in candidates for scene in demos]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda pair: detect(pair[0], pair[1], None, config), pairs))
    else:
        results = [detect(k, scene, None, config) for k, scene in pairs]

    report = ConsistencyReport()
    n = len(demos)
    for i, keypoint in enumerate(candidates):
        detections = results[i * n : (i + 1) * n]
        matched = sum(d.matched for d in detections)
        report.verdicts.append(
            CandidateVerdict(keypoint.id, detections, matched / n, passes_consistency(matched, n, delta))
        )
    return report


def candidates_in_mask(scene: FeaturedScene, mask: np.ndarray) -> np.ndarray:
    """Indices of usable scene points whose source pixel lies inside the mask."""
    if scene.cloud.pixels is None:
        raise ValueError("Scene cloud has no source pixels; cannot intersect with an image mask.")
    u, v = scene.cloud.pixels[:, 0], scene.cloud.pixels[:, 1]
    inside = mask[v, u]
    return np.flatnonzero(inside & scene.usable)


def sample_candidates(
    scene: FeaturedScene, mask: np.ndarray, count: int, config: DistillConfig, round_index: int
) -> List[Keypoint]:
    """Farthest point sampling inside the selected mask, seeded at the point nearest the mask centroid."""
    pool = candidates_in_mask(scene, mask)
    if len(pool) == 0:
        return []
    sub = scene.points[pool]
    seed = int(np.argmin(np.linalg.norm(sub - sub.mean(axis=0), axis=1)))
    picks = farthest_point_sample(sub, min(count, len(pool)), seed)
    return [
        make_keypoint(scene, int(pool[p]), f"kp_{i:02d}", config, seed=config.seed + 1000 * round_index + i)
        for i, p in enumerate(picks)
    ]


def distill(
    seed_scene: FeaturedScene,
    demo_scenes: Sequence[FeaturedScene],
    session: ProposalSession,
    config: DistillConfig = DistillConfig(),
    detection: DetectionConfig = DetectionConfig(),
) -> DistilledSkill:
    """
    Propose a region, pick a part mask, sample candidates in it and keep the consistent
    ones. A round whose passing fraction is below gamma is discarded and the backend is
    re-prompted, up to max_rounds.
    """
    feedback: Optional[str] = None
    for round_index in range(1, config.max_rounds + 1):
        try:
            outcome = session.propose_mask(round_index, feedback)
        except NoMasks as exc:
            feedback = f"No usable part mask came out of the selected cells ({exc}). Choose different cells."
            logger.warning("Round %d: %s", round_index, feedback)
            continue

        count = config.candidate_count if config.verify else config.unverified_count
        candidates = sample_candidates(seed_scene, outcome.mask, count, config, round_index)
        if not candidates:
            feedback = "The selected mask contains no usable 3-D points. Choose a different part."
            logger.warning("Round %d: %s", round_index, feedback)
            continue

        report = verify_consistency(candidates, demo_scenes, config.delta, detection, workers=config.workers)
        if config.verify:
            passing = [v for v in report.verdicts if v.passed]
            fraction = report.passing_fraction
            logger.info(
                "Round %d: %d/%d candidates consistent (%.2f, need %.2f)",
                round_index, len(passing), len(candidates), fraction, config.gamma,
            )
            if fraction < config.gamma:
                feedback = (
                    f"Only {len(passing)} of {len(candidates)} points on that part could be found again "
                    "across the demonstrations. Propose a different task-relevant part."
                )
                continue
        else:
            passing = report.verdicts
            fraction = report.passing_fraction

        kept_ids = {v.keypoint_id for v in passing}
        keypoints = [k for k in candidates if k.id in kept_ids]
        matches: Dict[int, Dict[str, np.ndarray]] = {i: {} for i in range(len(demo_scenes))}
        for verdict in passing:
            for demo_index, detection_result in enumerate(verdict.detections):
                if detection_result.matched:
                    matches[demo_index][verdict.keypoint_id] = detection_result.position
        provenance = {
            "rounds": round_index,
            "mask_id": outcome.mask_index,
            "cells": list(outcome.proposal.cells),
            "object": outcome.proposal.object_description,
            "part": outcome.proposal.part_description,
            "passing_fraction": fraction,
            "candidates": len(candidates),
            "verified": config.verify,
        }
        return DistilledSkill(keypoints=keypoints, matches=matches, provenance=provenance)

    raise DistillationFailed(
        f"No consistent keypoint set after {config.max_rounds} rounds.", reason="exhausted_rounds", rounds=config.max_rounds
    )


def _floats(values: np.ndarray) -> List[float]:
    return [float(x) for x in np.asarray(values).ravel()]


def skill_to_dict(skill: DistilledSkill) -> Dict[str, Any]:
    return {
        "format": SKILL_FORMAT,
        "keypoints": [
            {
                "id": k.id,
                "position": _floats(k.ref_position),
                "visual": _floats(k.ref_visual),
                "geometric": _floats(k.ref_geometric),
                "neighbors": [
                    {"offset": _floats(r.offset), "visual": _floats(r.visual), "geometric": _floats(r.geometric)}
                    for r in k.neighbor_group
                ],
            }
            for k in sorted(skill.keypoints, key=lambda k: k.id)
        ],
        "matches": [
            {"demo": demo, "points": {kid: _floats(pos) for kid, pos in sorted(points.items())}}
            for demo, points in sorted(skill.matches.items())
        ],
        "provenance": skill.provenance,
    }


def skill_from_dict(doc: Dict[str, Any]) -> DistilledSkill:
    if doc.get("format") != SKILL_FORMAT:
        raise FormatError(f"Unsupported skill document format {doc.get('format')!r}")
    try:
        keypoints = [
            Keypoint(
                id=k["id"],
                ref_position=np.array(k["position"], dtype=np.float64),
                ref_visual=np.array(k["visual"], dtype=np.float64),
                ref_geometric=np.array(k["geometric"], dtype=np.float64),
                neighbor_group=tuple(
                    NeighborRecord(
                        np.array(r["offset"], dtype=np.float64),
                        np.array(r["visual"], dtype=np.float64),
                        np.array(r["geometric"], dtype=np.float64),
                    )
                    for r in k["neighbors"]
                ),
            )
            for k in doc["keypoints"]
        ]
        matches = {
            int(entry["demo"]): {kid: np.array(pos, dtype=np.float64) for kid, pos in entry["points"].items()}
            for entry in doc["matches"]
        }
    except (KeyError, TypeError) as exc:
        raise FormatError(f"Malformed skill document: {exc}") from exc
    return DistilledSkill(keypoints=keypoints, matches=matches, provenance=dict(doc.get("provenance", {})))


def save_skill(path: Path, skill: DistilledSkill) -> None:
    Path(path).write_text(json.dumps(skill_to_dict(skill), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_skill(path: Path) -> DistilledSkill:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Skill file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc
    return skill_from_dict(doc)


def nearest_index(scene: FeaturedScene, position: np.ndarray) -> int:
    """Index of the scene point closest to a position (exact for matched positions)."""
    _, idx = cKDTree(scene.points).query(np.asarray(position, dtype=np.float64))
    return int(idx)

