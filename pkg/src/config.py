try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Tuple

from .errors import ConfigError

ROOT_DIR = Path(__file__).resolve().parent.parent
DEFAULT_REPORT_CSV = ROOT_DIR / "reports" / "report.csv"

# geometry / features
CLOUD_STRIDE = 2
FPFH_RADIUS = 0.05
FPFH_BINS = 11
VISUAL_DIM = 64
VISUAL_SEED = 7
LAMBDA_VIS = 0.75
LAMBDA_GEO = 0.25

# keypoint detection and distillation
TAU_SIM = 0.6
CONSENSUS_RADIUS = 0.03
NEIGHBOR_COUNT = 8
NEIGHBOR_RADIUS = 0.02
MASK_DISCOUNT = 0.5
DELTA = 0.3
GAMMA = 0.5
CANDIDATE_COUNT = 32
UNVERIFIED_COUNT = 8
MAX_ROUNDS = 5
DISTILL_SEED = 0

# proposal backends
GRID_ROWS = 8
GRID_COLS = 8
QUERY_DENSITY = 3
NMS_IOU_THRESHOLD = 0.9
NMS_CONFIDENCE_FLOOR = 0.7
PARSE_RETRIES = 3
VIDEO_FRAMES = ("first", "middle", "last")
BACKEND_URL = ""
BACKEND_MODEL = "vlm-default"
BACKEND_TOKEN_ENV = "KEYPOINT_VLM_TOKEN"
BACKEND_TIMEOUT_SECONDS = 60.0

# policy
HORIZON = 48
POSE_DIM = 10
DIFFUSION_STEPS = 100
HIDDEN_WIDTH = 128
RESIDUAL_BLOCKS = 3
TRAIN_STEPS = 1500
BATCH_SIZE = 32
LEARNING_RATE = 1e-3
TRAIN_SEED = 0
SCALE_FLOOR = 1e-6
LOG_EVERY = 250

# runtime
PHASE_THRESHOLD = 0.10
RRT_STEP = 0.05
RRT_MAX_ITERATIONS = 20000
RRT_SMOOTHING_ITERATIONS = 200
COLLISION_RESOLUTION = 0.01
PLANNER_SEED = 0
N_SAMPLES = 8
SAMPLE_SEED = 0
START_POSITION = (0.0, -0.4, 0.35)
EVAL_DETECTION_TOLERANCE = 0.03

# synthetic tasks
SYNTHETIC_DEMOS = 10
SYNTHETIC_WIDTH = 160
SYNTHETIC_HEIGHT = 120
SYNTHETIC_VARIATION = "all"

TRAJECTORY_COLUMNS = ["t", "x", "y", "z", "r1", "r2", "r3", "r4", "r5", "r6", "grip"]
REPORT_COLUMNS = [
    "task",
    "seed",
    "variation",
    "rounds",
    "keypoints",
    "detection_rate",
    "endpoint_error",
    "endpoint_error_fraction",
    "plan_feasible",
    "chosen_index",
    "status",
    "seconds",
]


@dataclass(frozen=True)
class FeatureConfig:
    stride: int = CLOUD_STRIDE
    fpfh_radius: float = FPFH_RADIUS
    visual_dim: int = VISUAL_DIM
    visual_seed: int = VISUAL_SEED
    provider: str = "procedural"


@dataclass(frozen=True)
class DetectionConfig:
    lambda_vis: float = LAMBDA_VIS
    lambda_geo: float = LAMBDA_GEO
    tau_sim: float = TAU_SIM
    consensus_radius: float = CONSENSUS_RADIUS
    consensus: bool = True
    mask_discount: float = MASK_DISCOUNT


@dataclass(frozen=True)
class DistillConfig:
    delta: float = DELTA
    gamma: float = GAMMA
    candidate_count: int = CANDIDATE_COUNT
    neighbor_count: int = NEIGHBOR_COUNT
    neighbor_radius: float = NEIGHBOR_RADIUS
    max_rounds: int = MAX_ROUNDS
    seed: int = DISTILL_SEED
    verify: bool = True
    unverified_count: int = UNVERIFIED_COUNT
    workers: int = 1


@dataclass(frozen=True)
class ProposalConfig:
    grid_rows: int = GRID_ROWS
    grid_cols: int = GRID_COLS
    query_density: int = QUERY_DENSITY
    iou_threshold: float = NMS_IOU_THRESHOLD
    confidence_floor: float = NMS_CONFIDENCE_FLOOR
    parse_retries: int = PARSE_RETRIES
    frames: Tuple[str, ...] = VIDEO_FRAMES


@dataclass(frozen=True)
class BackendConfig:
    url: str = BACKEND_URL
    model: str = BACKEND_MODEL
    token_env: str = BACKEND_TOKEN_ENV
    timeout: float = BACKEND_TIMEOUT_SECONDS


@dataclass(frozen=True)
class TrainConfig:
    horizon: int = HORIZON
    diffusion_steps: int = DIFFUSION_STEPS
    hidden_width: int = HIDDEN_WIDTH
    residual_blocks: int = RESIDUAL_BLOCKS
    steps: int = TRAIN_STEPS
    batch_size: int = BATCH_SIZE
    learning_rate: float = LEARNING_RATE
    seed: int = TRAIN_SEED
    scale_floor: float = SCALE_FLOOR
    log_every: int = LOG_EVERY


@dataclass(frozen=True)
class PlannerConfig:
    step: float = RRT_STEP
    max_iterations: int = RRT_MAX_ITERATIONS
    smoothing_iterations: int = RRT_SMOOTHING_ITERATIONS
    resolution: float = COLLISION_RESOLUTION
    seed: int = PLANNER_SEED


@dataclass(frozen=True)
class InferConfig:
    n_samples: int = N_SAMPLES
    seed: int = SAMPLE_SEED
    phase_threshold: float = PHASE_THRESHOLD
    start_position: Tuple[float, ...] = START_POSITION


@dataclass(frozen=True)
class SyntheticConfig:
    n_demos: int = SYNTHETIC_DEMOS
    width: int = SYNTHETIC_WIDTH
    height: int = SYNTHETIC_HEIGHT
    variation: str = SYNTHETIC_VARIATION


@dataclass(frozen=True)
class Settings:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


def _flatten(table: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Turn nested TOML tables into dotted keys."""
    flat: Dict[str, Any] = {}
    for key, value in table.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def settings_from_mapping(values: Dict[str, Any]) -> Settings:
    """Build Settings from a (possibly nested) mapping of dotted keys."""
    settings = Settings()
    grouped: Dict[str, Dict[str, Any]] = {}
    for dotted, value in _flatten(values).items():
        section, _, name = dotted.partition(".")
        if not name or "." in name:
            raise ConfigError(f"Unknown config key '{dotted}'")
        grouped.setdefault(section, {})[name] = value

    for section, overrides in grouped.items():
        if not hasattr(settings, section):
            raise ConfigError(f"Unknown config section '{section}'")
        current = getattr(settings, section)
        known = {f.name for f in fields(current)}
        coerced = {}
        for name, value in overrides.items():
            if name not in known:
                raise ConfigError(f"Unknown config key '{section}.{name}'")
            coerced[name] = _coerce(value, getattr(current, name), f"{section}.{name}")
        settings = replace(settings, **{section: replace(current, **coerced)})
    return settings


def load_settings(path: Path | str | None = None) -> Settings:
    """Read a TOML config file; missing path means all defaults."""
    if path is None:
        return Settings()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with path.open("rb") as handle:
            raw = tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path} is not valid TOML: {exc}") from exc
    return settings_from_mapping(raw)
