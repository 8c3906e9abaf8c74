"""Rigid-body math, RGBD deprojection and farthest point sampling.

Conventions: the camera frame is x right, y down, z forward; pixel `(u, v)` is
(column, row); every point cloud lives in the world frame.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import CountExceedsCloud, DegenerateRotation, InvalidTransform, PixelOutOfBounds

ORTHONORMAL_TOL = 1e-9
DEGENERATE_NORM = 1e-8


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        residual = np.linalg.norm(rotation.T @ rotation - np.eye(3))
        if residual > ORTHONORMAL_TOL or np.linalg.det(rotation) <= 0:
            raise InvalidTransform(f"Rotation is not a proper orthonormal matrix (residual {residual:.2e}).")
        if not np.all(np.isfinite(translation)):
            raise InvalidTransform("Translation must be finite.")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        """Accepts a 3x4 or 4x4 row-major matrix."""
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def as_matrix(self) -> np.ndarray:
        """3x4 [R | t]."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply `other` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rot_t = self.rotation.T
        return RigidTransform(rot_t, -rot_t @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


def rot6d_encode(rotation: np.ndarray) -> np.ndarray:
    """First two columns of a rotation matrix, flattened. Works on (..., 3, 3)."""
    rotation = np.asarray(rotation, dtype=np.float64)
    return np.concatenate([rotation[..., :, 0], rotation[..., :, 1]], axis=-1)


def rot6d_decode(rot6d: Sequence[float] | np.ndarray) -> np.ndarray:
    """Gram-Schmidt a (..., 6) array back into (..., 3, 3) rotation matrices."""
    r = np.asarray(rot6d, dtype=np.float64)
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    n2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERATE_NORM) or np.any(n2 <= DEGENERATE_NORM):
        raise DegenerateRotation("6D rotation has a near-zero column.")
    b1 = a1 / n1
    b2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    nb2 = np.linalg.norm(b2, axis=-1, keepdims=True)
    if np.any(nb2 <= DEGENERATE_NORM):
        raise DegenerateRotation("6D rotation columns are parallel.")
    b2 = b2 / nb2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def project_to_rotation(matrix: np.ndarray) -> np.ndarray:
    """Nearest rotation (chordal projection) of a (..., 3, 3) matrix via SVD."""
    u, _, vt = np.linalg.svd(matrix)
    det = np.linalg.det(u @ vt)
    fix = np.ones(u.shape[:-2] + (3,))
    fix[..., 2] = np.sign(det)
    return (u * fix[..., None, :]) @ vt


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    extrinsic: RigidTransform  # camera-to-world

    @property
    def origin(self) -> np.ndarray:
        return self.extrinsic.translation

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """World points -> (pixel uv float array, depth)."""
        cam = self.extrinsic.inverse().apply(points)
        k = self.intrinsics
        depth = cam[..., 2]
        u = k.fx * cam[..., 0] / depth + k.cx
        v = k.fy * cam[..., 1] / depth + k.cy
        return np.stack([u, v], axis=-1), depth


@dataclass(frozen=True)
class RGBDImage:
    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) meters
    camera: Camera
    name: str = ""

    def __post_init__(self):
        if self.color.shape[:2] != self.depth.shape:
            raise ValueError(f"Color {self.color.shape[:2]} and depth {self.depth.shape} sizes differ.")

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None
    pixels: Optional[np.ndarray] = None  # (N, 2) integer (u, v)
    viewpoint: Optional[np.ndarray] = None  # camera origin, world frame

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("Point cloud coordinates must be finite.")
        object.__setattr__(self, "points", points)
        for name in ("colors", "pixels"):
            value = getattr(self, name)
            if value is not None and len(value) != len(points):
                raise ValueError(f"{name} has {len(value)} rows for {len(points)} points.")

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def subset(self, indices: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.points[indices],
            None if self.colors is None else self.colors[indices],
            None if self.pixels is None else self.pixels[indices],
            self.viewpoint,
        )


def deproject(image: RGBDImage, pixel: Tuple[int, int]) -> Optional[np.ndarray]:
    """World point for one pixel, or None when its depth is invalid."""
    u, v = int(pixel[0]), int(pixel[1])
    if not (0 <= u < image.width and 0 <= v < image.height):
        raise PixelOutOfBounds(f"Pixel ({u}, {v}) outside {image.width}x{image.height} image.")
    z = float(image.depth[v, u])
    if not np.isfinite(z) or z <= 0:
        return None
    k = image.camera.intrinsics
    cam = np.array([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z])
    return image.camera.extrinsic.apply(cam)


def cloud_from_rgbd(image: RGBDImage, stride: int = 1) -> PointCloud:
    """One world point per valid pixel on the stride grid."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    vs, us = np.meshgrid(np.arange(0, image.height, stride), np.arange(0, image.width, stride), indexing="ij")
    us = us.ravel()
    vs = vs.ravel()
    z = image.depth[vs, us].astype(np.float64)
    keep = np.isfinite(z) & (z > 0)
    us, vs, z = us[keep], vs[keep], z[keep]
    k = image.camera.intrinsics
    cam = np.stack([(us - k.cx) / k.fx * z, (vs - k.cy) / k.fy * z, z], axis=1)
    return PointCloud(
        points=image.camera.extrinsic.apply(cam),
        colors=image.color[vs, us],
        pixels=np.stack([us, vs], axis=1).astype(np.int64),
        viewpoint=image.camera.origin.copy(),
    )


def farthest_point_sample(cloud: PointCloud | np.ndarray, count: int, seed_index: int = 0) -> List[int]:
    """Greedy max-min subset; ties go to the lowest index."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(points)
    if count > n:
        raise CountExceedsCloud(f"Requested {count} samples from a cloud of {n} points.")
    if count <= 0:
        return []
    if not 0 <= seed_index < n:
        raise IndexError(f"seed_index {seed_index} outside cloud of {n} points")

    selected = [int(seed_index)]
    min_dist = np.sqrt(((points - points[seed_index]) ** 2).sum(axis=1))
    min_dist[seed_index] = -np.inf
    while len(selected) < count:
        idx = int(np.argmax(min_dist))
        selected.append(idx)
        min_dist = np.minimum(min_dist, np.sqrt(((points - points[idx]) ** 2).sum(axis=1)))
        min_dist[selected] = -np.inf
    return selected


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> RigidTransform:
    """Camera-to-world transform for a camera at `eye` looking at `target`."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)
    return RigidTransform(project_to_rotation(rotation), np.asarray(eye, dtype=np.float64))


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
