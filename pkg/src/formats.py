"""Readers and writers for the on-disk formats listed in docs/FORMATS.md."""
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from . import schema
from .config import TRAJECTORY_COLUMNS
from .errors import FormatError, MissingFeatureFile
from .geometry import Camera, CameraIntrinsics, RGBDImage, RigidTransform

DEPTH_MAGIC = b"KDEP"
FEATURE_MAGIC = b"KFEA"
_DEPTH_HEADER = struct.Struct("<4sIII")
_FEATURE_HEADER = struct.Struct("<4sII")


def write_depth(path: Path, depth: np.ndarray) -> None:
    height, width = depth.shape
    with Path(path).open("wb") as handle:
        handle.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, width, height, 0))
        handle.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _DEPTH_HEADER.size:
        raise FormatError(f"{path}: truncated depth header")
    magic, width, height, _ = _DEPTH_HEADER.unpack_from(raw)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad depth magic {magic!r}")
    body = raw[_DEPTH_HEADER.size :]
    if len(body) != width * height * 4:
        raise FormatError(f"{path}: expected {width * height} depth values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(height, width).astype(np.float32)


def write_color(path: Path, color: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(color, dtype=np.uint8)).save(path, format="PPM")


def read_color(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.array(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise FormatError(f"{path}: unreadable color raster ({exc})") from exc


def write_camera(path: Path, camera: Camera) -> None:
    k = camera.intrinsics
    extrinsic = " ".join(repr(float(x)) for x in camera.extrinsic.as_matrix().ravel())
    lines = [
        f"fx = {k.fx!r}",
        f"fy = {k.fy!r}",
        f"cx = {k.cx!r}",
        f"cy = {k.cy!r}",
        f"extrinsic = {extrinsic}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_camera(path: Path) -> Camera:
    values: Dict[str, List[float]] = {}
    for raw_line in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, rest = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: expected 'key = value', got {raw_line!r}")
        try:
            values[key.strip()] = [float(x) for x in rest.split()]
        except ValueError as exc:
            raise FormatError(f"{path}: non-numeric value for {key.strip()}") from exc
    missing = [k for k in ("fx", "fy", "cx", "cy", "extrinsic") if k not in values]
    if missing:
        raise FormatError(f"{path}: missing keys {', '.join(missing)}")
    if len(values["extrinsic"]) != 12:
        raise FormatError(f"{path}: extrinsic needs 12 values, got {len(values['extrinsic'])}")
    intrinsics = CameraIntrinsics(values["fx"][0], values["fy"][0], values["cx"][0], values["cy"][0])
    extrinsic = RigidTransform.from_matrix(np.array(values["extrinsic"]).reshape(3, 4))
    return Camera(intrinsics, extrinsic)


def write_rgbd(stem: Path, image: RGBDImage) -> None:
    """Writes <stem>.ppm, <stem>.kdep and <stem>.cam."""
    stem = Path(stem)
    write_color(stem.with_suffix(".ppm"), image.color)
    write_depth(stem.with_suffix(".kdep"), image.depth)
    write_camera(stem.with_suffix(".cam"), image.camera)


def read_rgbd(stem: Path) -> RGBDImage:
    stem = Path(stem)
    for suffix in (".ppm", ".kdep", ".cam"):
        if not stem.with_suffix(suffix).exists():
            raise FileNotFoundError(f"Missing {stem.with_suffix(suffix)}")
    return RGBDImage(
        color=read_color(stem.with_suffix(".ppm")),
        depth=read_depth(stem.with_suffix(".kdep")),
        camera=read_camera(stem.with_suffix(".cam")),
        name=stem.name,
    )


def write_features(path: Path, features: np.ndarray) -> None:
    features = np.asarray(features)
    n, dim = features.shape
    with Path(path).open("wb") as handle:
        handle.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, n, dim))
        handle.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFeatureFile(f"Feature sidecar not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated feature header")
    magic, n, dim = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad feature magic {magic!r}")
    body = raw[_FEATURE_HEADER.size :]
    if len(body) != n * dim * 4:
        raise FormatError(f"{path}: expected {n}x{dim} floats")
    return np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float64)


def write_trajectory(path: Path, poses: np.ndarray, times: np.ndarray | None = None) -> None:
    """Pose rows (x, y, z, r1..r6, grip) as CSV with 9 significant digits."""
    poses = np.asarray(poses, dtype=np.float64)
    if times is None:
        times = np.arange(len(poses), dtype=np.float64)
    frame = pd.DataFrame(np.column_stack([times, poses]), columns=TRAJECTORY_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.9g")


def read_trajectory(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """(times, poses), rounded to float32 precision, the precision the CSV keeps."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Trajectory file not found: {path}")
    try:
        raw = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise FormatError(f"{path}: unreadable CSV ({exc})") from exc
    frame, report = schema.normalize_trajectory_df(raw)
    if report:
        raise FormatError(f"{path}: " + "; ".join(report))
    values = frame[TRAJECTORY_COLUMNS].to_numpy(dtype=np.float64).astype(np.float32).astype(np.float64)
    return values[:, 0], values[:, 1:]


def write_label_png(path: Path, labels: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(labels, dtype=np.uint8)).save(path, format="PNG")


def read_label_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("L"), dtype=np.uint8)
