"""Keypoint-conditioned trajectory diffusion: representation, schedule, denoiser, training, sampling."""
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import POSE_DIM, SCALE_FLOOR, TrainConfig
from .errors import AllKeypointsNull, DimensionMismatch, FormatError, ShapeMismatch
from .geometry import project_to_rotation, rot6d_decode, rot6d_encode

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KDIF"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sIIIIII")
COSINE_OFFSET = 0.008
MAX_BETA = 0.999
TIME_EMBED_DIM = 32
KERNEL_SIZE = 5


# Trajectory representation ----------------------------------------------------


@dataclass(frozen=True)
class TrajectorySample:
    """H poses of (x, y, z, r1..r6, grip). `centroid` is None in the world frame."""

    poses: np.ndarray
    centroid: Optional[np.ndarray] = None

    def __post_init__(self):
        poses = np.asarray(self.poses, dtype=np.float64)
        if poses.ndim != 2 or poses.shape[1] != POSE_DIM:
            raise ShapeMismatch(f"Poses must be (H, {POSE_DIM}), got {poses.shape}")
        if len(poses) < 2:
            raise ShapeMismatch("A trajectory needs at least 2 poses.")
        if not np.all(np.isfinite(poses)):
            raise ValueError("Trajectory poses must be finite.")
        object.__setattr__(self, "poses", poses)
        if self.centroid is not None:
            object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=np.float64).reshape(3))

    @property
    def horizon(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, 0:3]

    @property
    def rot6d(self) -> np.ndarray:
        return self.poses[:, 3:9]

    @property
    def gripper(self) -> np.ndarray:
        return self.poses[:, 9]

    @property
    def object_relative(self) -> bool:
        return self.centroid is not None


def to_object_frame(traj: TrajectorySample, keypoint_positions: np.ndarray) -> TrajectorySample:
    """Positions relative to the keypoint centroid; rotations and gripper stay world-frame."""
    if traj.object_relative:
        raise ValueError("Trajectory is already object-relative.")
    keypoint_positions = np.asarray(keypoint_positions, dtype=np.float64).reshape(-1, 3)
    if len(keypoint_positions) == 0:
        raise ValueError("Need at least one keypoint to define the object frame.")
    centroid = keypoint_positions.mean(axis=0)
    poses = traj.poses.copy()
    poses[:, 0:3] -= centroid
    return TrajectorySample(poses, centroid)


def to_world_frame(traj: TrajectorySample) -> TrajectorySample:
    if not traj.object_relative:
        return traj
    poses = traj.poses.copy()
    poses[:, 0:3] += traj.centroid
    return TrajectorySample(poses, None)


def resample_trajectory(poses: np.ndarray, horizon: int) -> np.ndarray:
    """
    Exactly `horizon` poses, uniform in path length. Positions and gripper are
    interpolated linearly, rotations chordally (blend then project to SO(3)).
    """
    poses = np.asarray(poses, dtype=np.float64)
    if len(poses) < 2 or horizon < 2:
        raise ShapeMismatch("Resampling needs at least 2 input poses and a horizon of at least 2.")
    seg = np.linalg.norm(np.diff(poses[:, 0:3], axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 1e-12:
        s = np.arange(len(poses), dtype=np.float64)
    targets = np.linspace(0.0, s[-1], horizon)
    idx = np.clip(np.searchsorted(s, targets, side="right") - 1, 0, len(poses) - 2)
    span = s[idx + 1] - s[idx]
    w = np.where(span > 0, (targets - s[idx]) / np.where(span > 0, span, 1.0), 0.0)[:, None]

    lo, hi = poses[idx], poses[idx + 1]
    out = np.empty((horizon, POSE_DIM))
    out[:, 0:3] = (1 - w) * lo[:, 0:3] + w * hi[:, 0:3]
    out[:, 9] = (1 - w[:, 0]) * lo[:, 9] + w[:, 0] * hi[:, 9]
    blended = (1 - w[:, :, None]) * rot6d_decode(lo[:, 3:9]) + w[:, :, None] * rot6d_decode(hi[:, 3:9])
    out[:, 3:9] = rot6d_encode(project_to_rotation(blended))
    return out


# Conditioning -----------------------------------------------------------------


@dataclass(frozen=True)
class ConditionSet:
    keypoint_ids: Tuple[str, ...]
    positions: np.ndarray  # (K, 3) object-relative
    visual: np.ndarray  # (K, d_vis)
    geometric: np.ndarray  # (K, d_geo)
    centroid: np.ndarray
    filled: Tuple[bool, ...] = ()

    @property
    def visual_dim(self) -> int:
        return int(self.visual.shape[1])

    @property
    def geometric_dim(self) -> int:
        return int(self.geometric.shape[1])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.positions, self.visual, self.geometric], axis=1).ravel()


def build_condition(
    keypoint_ids: Sequence[str],
    found: Mapping[str, Tuple[np.ndarray, np.ndarray, np.ndarray]],
) -> ConditionSet:
    """
    Condition from (position, visual, geometric) per detected keypoint, ordered by id.
    Keypoints missing from `found` get the mean of the detected ones and are flagged.
    """
    ids = tuple(sorted(keypoint_ids))
    present = [k for k in ids if k in found]
    if not present:
        raise AllKeypointsNull("No keypoint was detected; cannot build a condition.")
    dims = {(np.asarray(found[k][1]).size, np.asarray(found[k][2]).size) for k in present}
    if len(dims) != 1:
        raise DimensionMismatch(f"Keypoint feature sizes disagree: {sorted(dims)}")

    pos = np.array([found[k][0] for k in present], dtype=np.float64)
    vis = np.array([found[k][1] for k in present], dtype=np.float64)
    geo = np.array([found[k][2] for k in present], dtype=np.float64)
    centroid = pos.mean(axis=0)
    fill = (pos.mean(axis=0), vis.mean(axis=0), geo.mean(axis=0))

    rows = [found[k] if k in found else fill for k in ids]
    filled = tuple(k not in found for k in ids)
    if any(filled):
        logger.warning("Filled %d missing keypoint(s) with the detected mean", sum(filled))
    return ConditionSet(
        keypoint_ids=ids,
        positions=np.array([r[0] for r in rows], dtype=np.float64) - centroid,
        visual=np.array([r[1] for r in rows], dtype=np.float64),
        geometric=np.array([r[2] for r in rows], dtype=np.float64),
        centroid=centroid,
        filled=filled,
    )


# Normalization ----------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    """Per-dimension min/max mapped to [-1, 1]."""

    low: np.ndarray
    high: np.ndarray
    floor: float = SCALE_FLOOR

    @classmethod
    def fit(cls, data: np.ndarray, floor: float = SCALE_FLOOR) -> "NormalizationStats":
        flat = np.asarray(data, dtype=np.float64).reshape(-1, np.shape(data)[-1])
        stats = cls(flat.min(axis=0), flat.max(axis=0), floor)
        flat_dims = int(np.sum((stats.high - stats.low) / 2 < floor))
        if flat_dims:
            logger.warning("%d dimension(s) have no spread; using scale floor %g", flat_dims, floor)
        return stats

    @property
    def offset(self) -> np.ndarray:
        return (self.high + self.low) / 2

    @property
    def scale(self) -> np.ndarray:
        return np.maximum((self.high - self.low) / 2, self.floor)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.offset) / self.scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.offset

    def to_dict(self) -> Dict[str, List[float]]:
        return {"low": self.low.tolist(), "high": self.high.tolist(), "floor": self.floor}

    @classmethod
    def from_dict(cls, doc: Dict) -> "NormalizationStats":
        return cls(np.array(doc["low"], dtype=np.float64), np.array(doc["high"], dtype=np.float64), float(doc["floor"]))


# Schedule ---------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @classmethod
    def cosine(cls, steps: int, s: float = COSINE_OFFSET) -> "NoiseSchedule":
        t = np.arange(steps + 1, dtype=np.float64) / steps
        f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
        alpha_bar = f / f[0]
        betas = np.clip(1 - alpha_bar[1:] / alpha_bar[:-1], 0.0, MAX_BETA)
        return cls(betas)

    @property
    def steps(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def tensors(self, dtype=torch.float32) -> Dict[str, torch.Tensor]:
        alpha_bars = self.alpha_bars
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        posterior_var = self.betas * (1 - prev) / (1 - alpha_bars)
        return {
            name: torch.as_tensor(value, dtype=dtype)
            for name, value in {
                "betas": self.betas,
                "sqrt_alpha_bars": np.sqrt(alpha_bars),
                "sqrt_one_minus_alpha_bars": np.sqrt(1 - alpha_bars),
                "posterior_mean_x0": self.betas * np.sqrt(prev) / (1 - alpha_bars),
                "posterior_mean_xt": (1 - prev) * np.sqrt(self.alphas) / (1 - alpha_bars),
                "posterior_std": np.sqrt(posterior_var),
            }.items()
        }


def forward_noise(
    x0: torch.Tensor, t: int | torch.Tensor, schedule: NoiseSchedule, noise: torch.Tensor
) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise, t scalar or one per batch row."""
    if x0.shape != noise.shape:
        raise ShapeMismatch(f"noise {tuple(noise.shape)} does not match x0 {tuple(x0.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 0) or torch.any(t >= schedule.steps):
        raise ValueError(f"t must lie in [0, {schedule.steps})")
    coef = schedule.tensors(dtype=x0.dtype)
    a = coef["sqrt_alpha_bars"][t]
    b = coef["sqrt_one_minus_alpha_bars"][t]
    if a.ndim == 1:
        shape = (-1,) + (1,) * (x0.ndim - 1)
        a, b = a.view(shape), b.view(shape)
    return a * x0 + b * noise


# Denoiser ---------------------------------------------------------------------


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(torch.arange(half, dtype=t.dtype) * -(math.log(10000.0) / (half - 1)))
        args = t[:, None] * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResidualBlock(nn.Module):
    def __init__(self, width: int, kernel_size: int = KERNEL_SIZE):
        super().__init__()
        groups = math.gcd(8, width)
        self.conv1 = nn.Conv1d(width, width, kernel_size, padding=kernel_size // 2)
        self.norm1 = nn.GroupNorm(groups, width)
        self.conv2 = nn.Conv1d(width, width, kernel_size, padding=kernel_size // 2)
        self.norm2 = nn.GroupNorm(groups, width)
        self.context = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.context(context)[:, :, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return x + h


class TemporalDenoiser(nn.Module):
    """Predicts the noise on a (B, H, pose_dim) trajectory batch given step and condition."""

    def __init__(self, pose_dim: int, condition_dim: int, width: int, blocks: int):
        super().__init__()
        self.pose_dim = pose_dim
        self.condition_dim = condition_dim
        self.input_proj = nn.Conv1d(pose_dim, width, 1)
        self.time_mlp = nn.Sequential(
            SinusoidalTimeEmbedding(TIME_EMBED_DIM),
            nn.Linear(TIME_EMBED_DIM, width),
            nn.SiLU(),
            nn.Linear(width, width),
        )
        self.condition_mlp = nn.Sequential(nn.Linear(condition_dim, width), nn.SiLU(), nn.Linear(width, width))
        self.blocks = nn.ModuleList(ResidualBlock(width) for _ in range(blocks))
        self.output_proj = nn.Conv1d(width, pose_dim, 1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        context = self.time_mlp(t) + self.condition_mlp(condition)
        h = self.input_proj(x.transpose(1, 2))
        for block in self.blocks:
            h = block(h, context)
        return self.output_proj(h).transpose(1, 2)


@dataclass
class DenoiserParams:
    model: TemporalDenoiser
    schedule: NoiseSchedule
    trajectory_stats: NormalizationStats
    condition_stats: NormalizationStats
    keypoint_ids: Tuple[str, ...]
    visual_dim: int
    geometric_dim: int
    config: TrainConfig = field(default_factory=TrainConfig)
    loss_report: Dict[str, float] = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def condition_dim(self) -> int:
        return self.model.condition_dim


def loss_for_batch(
    model: TemporalDenoiser,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    condition: torch.Tensor,
    t: torch.Tensor,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Mean squared error between the true and predicted noise."""
    x_t = forward_noise(x0, t, schedule, noise)
    return F.mse_loss(model(x_t, t.to(x0.dtype), condition), noise)


def _check_dataset(dataset: Sequence[Tuple[ConditionSet, TrajectorySample]], horizon: int) -> None:
    if not dataset:
        raise ValueError("Training needs at least one (condition, trajectory) pair.")
    ids = {c.keypoint_ids for c, _ in dataset}
    dims = {c.vector().size for c, _ in dataset}
    if len(ids) != 1 or len(dims) != 1:
        raise DimensionMismatch("All training conditions must share keypoint ids and feature sizes.")
    for _, traj in dataset:
        if traj.horizon != horizon:
            raise ShapeMismatch(f"Trajectory has {traj.horizon} poses; resample to {horizon} first.")
        if not traj.object_relative:
            raise ValueError("Training trajectories must be object-relative.")


def train(dataset: Sequence[Tuple[ConditionSet, TrajectorySample]], config: TrainConfig = TrainConfig()) -> DenoiserParams:
    _check_dataset(dataset, config.horizon)
    first = dataset[0][0]
    trajectories = np.stack([traj.poses for _, traj in dataset])
    conditions = np.stack([cond.vector() for cond, _ in dataset])
    traj_stats = NormalizationStats.fit(trajectories, config.scale_floor)
    cond_stats = NormalizationStats.fit(conditions, config.scale_floor)

    x_all = torch.as_tensor(traj_stats.normalize(trajectories), dtype=torch.float32)
    c_all = torch.as_tensor(cond_stats.normalize(conditions), dtype=torch.float32)
    schedule = NoiseSchedule.cosine(config.diffusion_steps)

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    model = TemporalDenoiser(POSE_DIM, c_all.shape[1], config.hidden_width, config.residual_blocks)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    losses: List[float] = []
    model.train()
    for step in range(1, config.steps + 1):
        idx = torch.randint(len(x_all), (config.batch_size,), generator=generator)
        t = torch.randint(schedule.steps, (config.batch_size,), generator=generator)
        noise = torch.randn(x_all[idx].shape, generator=generator)
        loss = loss_for_batch(model, schedule, x_all[idx], c_all[idx], t, noise)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.item()))
        if config.log_every and step % config.log_every == 0:
            window = losses[-config.log_every :]
            logger.info("step %d/%d  loss %.4f", step, config.steps, sum(window) / len(window))
    model.eval()

    report = loss_report(losses)
    logger.info("Training loss %.4f -> %.4f", report["initial_loss"], report["final_loss"])
    return DenoiserParams(
        model=model,
        schedule=schedule,
        trajectory_stats=traj_stats,
        condition_stats=cond_stats,
        keypoint_ids=first.keypoint_ids,
        visual_dim=first.visual_dim,
        geometric_dim=first.geometric_dim,
        config=config,
        loss_report=report,
    )


def loss_report(losses: Sequence[float]) -> Dict[str, float]:
    """Mean loss over the first and last tenth of training."""
    if not losses:
        return {"initial_loss": float("nan"), "final_loss": float("nan"), "steps": 0}
    window = max(1, len(losses) // 10)
    return {
        "initial_loss": float(np.mean(losses[:window])),
        "final_loss": float(np.mean(losses[-window:])),
        "steps": len(losses),
    }


def sample(params: DenoiserParams, condition: ConditionSet, count: int, seed: int) -> List[TrajectorySample]:
    """Ancestral DDPM sampling from pure noise; object-relative outputs around condition.centroid."""
    if tuple(condition.keypoint_ids) != tuple(params.keypoint_ids):
        raise DimensionMismatch("Condition keypoints differ from the ones the model was trained on.")
    vector = condition.vector()
    if vector.size != params.condition_dim:
        raise DimensionMismatch(f"Condition has {vector.size} values; model expects {params.condition_dim}.")
    if count < 1:
        return []

    coef = params.schedule.tensors()
    generator = torch.Generator().manual_seed(seed)
    c = torch.as_tensor(params.condition_stats.normalize(vector), dtype=torch.float32).expand(count, -1)
    x = torch.randn((count, params.horizon, POSE_DIM), generator=generator)
    with torch.no_grad():
        for t in reversed(range(params.schedule.steps)):
            t_batch = torch.full((count,), float(t))
            eps = params.model(x, t_batch, c)
            x0 = ((x - coef["sqrt_one_minus_alpha_bars"][t] * eps) / coef["sqrt_alpha_bars"][t]).clamp(-1.0, 1.0)
            x = coef["posterior_mean_x0"][t] * x0 + coef["posterior_mean_xt"][t] * x
            if t > 0:
                x = x + coef["posterior_std"][t] * torch.randn(x.shape, generator=generator)

    poses = params.trajectory_stats.denormalize(x.numpy().astype(np.float64))
    return [TrajectorySample(p, condition.centroid) for p in poses]


# Checkpoint -------------------------------------------------------------------


def save_params(path: Path, params: DenoiserParams) -> None:
    """KDIF header, JSON manifest, then the float32 weight blob in manifest order."""
    state = params.model.state_dict()
    tensors = [{"name": name, "shape": list(tensor.shape)} for name, tensor in state.items()]
    manifest = json.dumps(
        {
            "tensors": tensors,
            "trajectory_stats": params.trajectory_stats.to_dict(),
            "condition_stats": params.condition_stats.to_dict(),
            "keypoint_ids": list(params.keypoint_ids),
            "config": asdict(params.config),
            "loss_report": params.loss_report,
        },
        sort_keys=True,
    ).encode("utf-8")
    header = _CHECKPOINT_HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        params.horizon,
        params.visual_dim,
        params.geometric_dim,
        params.schedule.steps,
        len(manifest),
    )
    blob = b"".join(t.detach().cpu().numpy().astype("<f4").tobytes() for t in state.values())
    Path(path).write_bytes(header + manifest + blob)


def load_params(path: Path) -> DenoiserParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _CHECKPOINT_HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, horizon, visual_dim, geometric_dim, steps, manifest_len = _CHECKPOINT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = _CHECKPOINT_HEADER.size
    try:
        manifest = json.loads(raw[offset : offset + manifest_len].decode("utf-8"))
        config = TrainConfig(**manifest["config"])
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from exc
    offset += manifest_len

    keypoint_ids = tuple(manifest["keypoint_ids"])
    condition_dim = len(keypoint_ids) * (3 + visual_dim + geometric_dim)
    model = TemporalDenoiser(POSE_DIM, condition_dim, config.hidden_width, config.residual_blocks)
    state = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: weight blob ends inside tensor {entry['name']}")
        values = np.frombuffer(raw[offset:end], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(values.astype(np.float32))
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after weights")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise FormatError(f"{path}: weights do not fit the recorded architecture ({exc})") from exc
    model.eval()

    if config.horizon != horizon or config.diffusion_steps != steps:
        raise FormatError(f"{path}: header and manifest disagree on horizon or step count")
    return DenoiserParams(
        model=model,
        schedule=NoiseSchedule.cosine(steps),
        trajectory_stats=NormalizationStats.from_dict(manifest["trajectory_stats"]),
        condition_stats=NormalizationStats.from_dict(manifest["condition_stats"]),
        keypoint_ids=keypoint_ids,
        visual_dim=visual_dim,
        geometric_dim=geometric_dim,
        config=config,
        loss_report=dict(manifest.get("loss_report", {})),
    )
