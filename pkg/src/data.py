"""Skill dataset directories: description, seeding video and demonstrations."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from . import formats, schema
from .config import REPORT_COLUMNS
from .errors import FormatError
from .geometry import RGBDImage

logger = logging.getLogger(__name__)

DESCRIPTION_FILE = "description.txt"
VIDEO_DIR = "video"
DEMOS_DIR = "demos"
FEATURES_DIR = "features"
SEGMENTATION_DIR = "segmentation"
MASKS_DIR = "masks"
SEED_LABELS_FILE = "frame_0000_labels.png"


@dataclass(frozen=True)
class Demonstration:
    observation: RGBDImage
    trajectory: np.ndarray  # (T, 10)
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        traj = np.asarray(self.trajectory, dtype=np.float64)
        if traj.ndim != 2 or traj.shape[1] != 10 or len(traj) < 2:
            raise ValueError(f"Demonstration trajectory must be (T >= 2, 10), got {traj.shape}")
        object.__setattr__(self, "trajectory", traj)
        if self.times is not None:
            times = np.asarray(self.times, dtype=np.float64)
            if len(times) != len(traj) or np.any(np.diff(times) <= 0):
                raise ValueError("Demonstration timestamps must be strictly increasing, one per pose.")
            object.__setattr__(self, "times", times)


@dataclass(frozen=True)
class SkillBundle:
    description: str
    video: Tuple[RGBDImage, ...]
    demos: Tuple[Demonstration, ...]
    seed_labels: Optional[np.ndarray] = None
    root: Optional[Path] = None

    def __post_init__(self):
        if not self.video:
            raise ValueError("A skill needs at least one seeding video frame.")
        if not self.demos:
            raise ValueError("A skill needs at least one demonstration.")
        object.__setattr__(self, "video", tuple(self.video))
        object.__setattr__(self, "demos", tuple(self.demos))

    @property
    def seed_frame(self) -> RGBDImage:
        return self.video[0]

    @property
    def feature_dir(self) -> Optional[Path]:
        return None if self.root is None else self.root / FEATURES_DIR

    @property
    def mask_dir(self) -> Optional[Path]:
        return None if self.root is None else self.root / MASKS_DIR


@dataclass
class LoadReport:
    source: str = ""
    issues: List[str] = field(default_factory=list)
    warnings: Dict[str, int] = field(default_factory=dict)
    demos_loaded: int = 0


def _demo_dirs(root: Path) -> List[Path]:
    base = root / DEMOS_DIR
    return sorted(p for p in base.iterdir() if p.is_dir()) if base.is_dir() else []


def _frame_stems(root: Path) -> List[Path]:
    base = root / VIDEO_DIR
    if not base.is_dir():
        return []
    return [p.with_suffix("") for p in sorted(base.glob("frame_*.ppm"))]


def load_skill_dir(path: Path | str) -> Tuple[SkillBundle, LoadReport]:
    """
    Read a skill dataset directory. Demonstrations with an unreadable trajectory
    are skipped and counted; a missing description, video or any usable demo is fatal.
    """
    root = Path(path)
    report = LoadReport(source=str(root))
    if not root.is_dir():
        raise FileNotFoundError(f"Skill directory not found: {root}")

    desc_path = root / DESCRIPTION_FILE
    if not desc_path.exists():
        raise FileNotFoundError(f"Missing {desc_path}")
    description = desc_path.read_text(encoding="utf-8")

    stems = _frame_stems(root)
    if not stems:
        raise FormatError(f"{root / VIDEO_DIR} holds no frame_*.ppm frames")
    video = tuple(formats.read_rgbd(stem) for stem in stems)

    demos: List[Demonstration] = []
    for demo_dir in _demo_dirs(root):
        try:
            observation = formats.read_rgbd(demo_dir / "obs")
            times, poses = formats.read_trajectory(demo_dir / "traj.csv")
        except (FileNotFoundError, FormatError) as exc:
            report.issues.append(f"{demo_dir.name}: {exc}")
            report.warnings["skipped_demos"] = report.warnings.get("skipped_demos", 0) + 1
            continue
        demos.append(Demonstration(RGBDImage(observation.color, observation.depth, observation.camera, demo_dir.name), poses, times))
    if not demos:
        raise FormatError(f"{root} has no readable demonstrations")
    report.demos_loaded = len(demos)

    labels = None
    labels_path = root / SEGMENTATION_DIR / SEED_LABELS_FILE
    if labels_path.exists():
        labels = formats.read_label_png(labels_path)
        if labels.shape != video[0].depth.shape:
            report.issues.append(f"{labels_path.name} size {labels.shape} does not match the seed frame")
            labels = None

    if report.issues:
        logger.warning("Loaded %s with %d issue(s): %s", root, len(report.issues), "; ".join(report.issues))
    return SkillBundle(description, video, tuple(demos), labels, root), report


def write_skill_dir(path: Path | str, bundle: SkillBundle) -> Path:
    """Write a bundle in the directory layout `load_skill_dir` reads."""
    root = Path(path)
    (root / VIDEO_DIR).mkdir(parents=True, exist_ok=True)
    (root / DESCRIPTION_FILE).write_text(bundle.description, encoding="utf-8")
    for i, frame in enumerate(bundle.video):
        formats.write_rgbd(root / VIDEO_DIR / f"frame_{i:04d}", frame)
    for i, demo in enumerate(bundle.demos):
        demo_dir = root / DEMOS_DIR / f"demo_{i:02d}"
        demo_dir.mkdir(parents=True, exist_ok=True)
        formats.write_rgbd(demo_dir / "obs", demo.observation)
        formats.write_trajectory(demo_dir / "traj.csv", demo.trajectory, demo.times)
    if bundle.seed_labels is not None:
        (root / SEGMENTATION_DIR).mkdir(exist_ok=True)
        formats.write_label_png(root / SEGMENTATION_DIR / SEED_LABELS_FILE, bundle.seed_labels)
    return root


def load_eval_report(path: Path | str) -> Tuple[pd.DataFrame, LoadReport]:
    """Evaluation report CSV -> normalized table; problems go to the report, not exceptions."""
    path = Path(path)
    report = LoadReport(source=str(path))
    if not path.exists():
        report.issues.append(f"No report at {path}. Run `python -m src eval-synthetic` first.")
        return pd.DataFrame(columns=REPORT_COLUMNS), report
    try:
        raw = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        report.issues.append(f"Unreadable report: {exc}")
        return pd.DataFrame(columns=REPORT_COLUMNS), report

    frame, problems = schema.normalize_report_df(raw)
    report.issues.extend(problems)
    failed = int((~frame["plan_feasible"]).sum()) if not frame.empty else 0
    if failed:
        report.warnings["failed_tasks"] = failed
    return frame, report


def apply_report_filters(df: pd.DataFrame, filters: Dict[str, List]) -> pd.DataFrame:
    """Filter by variation and status."""
    if df is None or df.empty or not filters:
        return df

    filtered = df.copy()
    for col in ["variation", "status"]:
        vals = filters.get(col) or []
        if vals and col in filtered.columns:
            filtered = filtered[filtered[col].isin(vals)]
    return filtered
