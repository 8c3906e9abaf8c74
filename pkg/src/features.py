"""Per-point feature fields: FPFH geometry, visual providers and the weighted similarity."""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import formats
from .config import FPFH_BINS, LAMBDA_GEO, LAMBDA_VIS, VISUAL_DIM, VISUAL_SEED, FeatureConfig
from .errors import IndexMismatch, MissingFeatureFile, ZeroVector
from .geometry import PointCloud, RGBDImage, cloud_from_rgbd

logger = logging.getLogger(__name__)

FPFH_DIM = 3 * FPFH_BINS
ZERO_NORM = 1e-12


@dataclass(frozen=True)
class SimilarityWeights:
    lambda_vis: float = LAMBDA_VIS
    lambda_geo: float = LAMBDA_GEO

    def __post_init__(self):
        if self.lambda_vis < 0 or self.lambda_geo < 0:
            raise ValueError("Similarity weights must be non-negative.")


@dataclass(frozen=True)
class FeatureField:
    visual: np.ndarray  # (N, d_vis)
    geometric: np.ndarray  # (N, 33)

    def __post_init__(self):
        if len(self.visual) != len(self.geometric):
            raise IndexMismatch(f"{len(self.visual)} visual rows vs {len(self.geometric)} geometric rows")

    @property
    def degenerate(self) -> np.ndarray:
        """Rows whose geometric descriptor is the zero fallback."""
        return ~np.any(self.geometric != 0, axis=1)


@dataclass(frozen=True)
class FeaturedScene:
    """A point cloud with aligned feature channels plus where it came from."""

    cloud: PointCloud
    field: FeatureField
    image: Optional[RGBDImage] = None
    name: str = ""

    def __post_init__(self):
        if len(self.field.visual) != len(self.cloud):
            raise IndexMismatch(f"{len(self.field.visual)} feature rows for {len(self.cloud)} points")

    def __len__(self) -> int:
        return len(self.cloud)

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    @property
    def usable(self) -> np.ndarray:
        """Points whose feature rows are both non-zero."""
        vis_ok = np.linalg.norm(self.field.visual, axis=1) > ZERO_NORM
        geo_ok = np.linalg.norm(self.field.geometric, axis=1) > ZERO_NORM
        return vis_ok & geo_ok


def estimate_normals(cloud: PointCloud, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    PCA normals over the radius neighbourhood, flipped toward the cloud's viewpoint
    (or +z when it has none). Returns (normals, degenerate_flags).
    """
    points = cloud.points
    n = len(points)
    if n == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    tree = cKDTree(points)
    neighbors = tree.query_ball_point(points, r=radius)
    counts = np.array([len(nb) for nb in neighbors])
    rows = np.repeat(np.arange(n), counts)
    cols = np.concatenate([np.asarray(nb, dtype=np.int64) for nb in neighbors])

    # offsets relative to the query point keep the covariance translation-exact
    d = points[cols] - points[rows]
    sum_d = np.zeros((n, 3))
    sum_dd = np.zeros((n, 3, 3))
    np.add.at(sum_d, rows, d)
    np.add.at(sum_dd, rows, d[:, :, None] * d[:, None, :])
    mean = sum_d / counts[:, None]
    cov = sum_dd / counts[:, None, None] - mean[:, :, None] * mean[:, None, :]

    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]
    scale = np.maximum(eigvals[:, 2], ZERO_NORM)
    degenerate = (counts < 3) | (eigvals[:, 1] <= 1e-9 * scale) | (eigvals[:, 2] <= ZERO_NORM)

    if cloud.viewpoint is not None:
        toward = np.asarray(cloud.viewpoint, dtype=np.float64) - points
    else:
        toward = np.tile([0.0, 0.0, 1.0], (n, 1))
    flip = np.sum(normals * toward, axis=1) < 0
    normals[flip] *= -1
    normals[degenerate] = 0.0
    return normals, degenerate


def _pair_features(p1, n1, p2, n2) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Darboux-frame angles (theta, alpha, phi) for point pairs; last output marks valid pairs."""
    delta = p2 - p1
    dist = np.linalg.norm(delta, axis=1)
    valid = dist > ZERO_NORM
    dn = np.where(valid[:, None], delta / np.where(valid, dist, 1.0)[:, None], 0.0)

    angle1 = np.sum(n1 * dn, axis=1)
    angle2 = np.sum(n2 * dn, axis=1)
    swap = np.arccos(np.clip(np.abs(angle1), -1, 1)) > np.arccos(np.clip(np.abs(angle2), -1, 1))
    src_n = np.where(swap[:, None], n2, n1)
    tgt_n = np.where(swap[:, None], n1, n2)
    dn = np.where(swap[:, None], -dn, dn)
    phi = np.where(swap, -angle2, angle1)

    v = np.cross(dn, src_n)
    v_norm = np.linalg.norm(v, axis=1)
    valid &= v_norm > ZERO_NORM
    v = v / np.where(v_norm > ZERO_NORM, v_norm, 1.0)[:, None]
    w = np.cross(src_n, v)
    alpha = np.sum(v * tgt_n, axis=1)
    theta = np.arctan2(np.sum(w * tgt_n, axis=1), np.sum(src_n * tgt_n, axis=1))
    return theta, alpha, phi, valid


def _bin(values: np.ndarray, low: float, high: float) -> np.ndarray:
    idx = np.floor(FPFH_BINS * (values - low) / (high - low)).astype(np.int64)
    return np.clip(idx, 0, FPFH_BINS - 1)


def _normalize_histograms(hist: np.ndarray) -> np.ndarray:
    """Scale each 11-bin block of an (N, 33) array to sum to 100; zero blocks stay zero."""
    blocks = hist.reshape(len(hist), 3, FPFH_BINS)
    sums = blocks.sum(axis=2, keepdims=True)
    scaled = np.where(sums > 0, blocks * (100.0 / np.where(sums > 0, sums, 1.0)), 0.0)
    return scaled.reshape(len(hist), FPFH_DIM)


def compute_fpfh(cloud: PointCloud, radius: float) -> np.ndarray:
    """
    Fast Point Feature Histograms, 33 values per point (three 11-bin angle histograms,
    each summing to 100). Points with no usable neighbours, or with a degenerate
    normal, get the zero row.
    """
    if radius <= 0:
        raise ValueError("FPFH radius must be positive.")
    points = cloud.points
    n = len(points)
    if n == 0:
        return np.zeros((0, FPFH_DIM))

    normals, degenerate = estimate_normals(cloud, radius)
    if degenerate.any():
        logger.debug("FPFH: %d of %d points have degenerate normals", int(degenerate.sum()), n)

    tree = cKDTree(points)
    pairs = tree.query_pairs(r=radius, output_type="ndarray")
    if len(pairs):
        pairs = np.concatenate([pairs, pairs[:, ::-1]])
        keep = ~degenerate[pairs[:, 0]] & ~degenerate[pairs[:, 1]]
        pairs = pairs[keep]
    if len(pairs) == 0:
        return np.zeros((n, FPFH_DIM))
    src, dst = pairs[:, 0], pairs[:, 1]

    theta, alpha, phi, valid = _pair_features(points[src], normals[src], points[dst], normals[dst])
    spfh = np.zeros((n, FPFH_DIM))
    for offset, (values, low, high) in enumerate(((theta, -np.pi, np.pi), (alpha, -1.0, 1.0), (phi, -1.0, 1.0))):
        bins = _bin(values[valid], low, high) + offset * FPFH_BINS
        np.add.at(spfh, (src[valid], bins), 1.0)
    spfh = _normalize_histograms(spfh)

    dist = np.linalg.norm(points[dst] - points[src], axis=1)
    weights = sparse.csr_matrix((1.0 / dist, (src, dst)), shape=(n, n))
    neighbor_counts = np.bincount(src, minlength=n).astype(np.float64)
    aggregated = np.asarray(weights @ spfh)
    aggregated /= np.maximum(neighbor_counts, 1.0)[:, None]

    fpfh = _normalize_histograms(spfh + aggregated)
    fpfh[degenerate] = 0.0
    fpfh[~spfh.any(axis=1)] = 0.0
    return fpfh


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= ZERO_NORM or nb <= ZERO_NORM:
        raise ZeroVector("Cosine similarity is undefined for a zero vector.")
    return float(np.dot(a, b) / (na * nb))


def combined_similarity(q_vis, q_geo, r_vis, r_geo, weights: SimilarityWeights = SimilarityWeights()) -> float:
    """lambda_vis * cos(visual) + lambda_geo * cos(geometric)."""
    return weights.lambda_vis * cosine_similarity(q_vis, r_vis) + weights.lambda_geo * cosine_similarity(q_geo, r_geo)


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return np.where(norms > ZERO_NORM, rows / np.where(norms > ZERO_NORM, norms, 1.0), 0.0)


def similarity_matrix(
    field: FeatureField, ref_visual: np.ndarray, ref_geometric: np.ndarray, weights: SimilarityWeights
) -> np.ndarray:
    """
    Combined similarity of every scene point against every reference row pair.
    ref arrays are (M, d); the result is (M, N). Zero-norm scene rows contribute 0
    for their channel.
    """
    vis = _unit_rows(np.atleast_2d(ref_visual)) @ _unit_rows(field.visual).T
    geo = _unit_rows(np.atleast_2d(ref_geometric)) @ _unit_rows(field.geometric).T
    return weights.lambda_vis * vis + weights.lambda_geo * geo


class VisualFeatureProvider(ABC):
    """Per-point visual features for a scene; implementations must be deterministic."""

    dim: int

    @abstractmethod
    def features_for_scene(self, image: Optional[RGBDImage], cloud: PointCloud) -> np.ndarray:
        ...


class ProceduralFeatureProvider(VisualFeatureProvider):
    """
    Fixed random Fourier projection of point colour and normal elevation.

    Every row depends only on the point's own colour and (world-frame) normal, so the
    same surface point seen from two cameras gets the same row.
    """

    def __init__(
        self,
        dim: int = VISUAL_DIM,
        seed: int = VISUAL_SEED,
        color_bandwidth: float = 0.1,
        normal_bandwidth: float = 0.5,
        normal_radius: float = 0.03,
    ):
        self.dim = dim
        self.normal_radius = normal_radius
        rng = np.random.default_rng(seed)
        self._scales = np.array([1 / color_bandwidth] * 3 + [1 / normal_bandwidth])
        self._projection = rng.normal(size=(4, dim))
        self._phase = rng.uniform(0.0, 2 * np.pi, size=dim)

    def encode(self, colors: np.ndarray, normal_z: np.ndarray) -> np.ndarray:
        inputs = np.column_stack([np.asarray(colors, dtype=np.float64) / 255.0, normal_z]) * self._scales
        return np.sqrt(2.0 / self.dim) * np.cos(inputs @ self._projection + self._phase)

    def features_for_scene(self, image: Optional[RGBDImage], cloud: PointCloud) -> np.ndarray:
        if cloud.colors is None:
            raise MissingFeatureFile("Procedural visual features need point colours.")
        normals, _ = estimate_normals(cloud, self.normal_radius)
        return self.encode(cloud.colors, normals[:, 2])


class FileFeatureProvider(VisualFeatureProvider):
    """Reads precomputed rows from a KFEA sidecar, index-aligned with the cloud."""

    def __init__(self, directory: Path, dim: int = VISUAL_DIM):
        self.directory = Path(directory)
        self.dim = dim

    def path_for(self, image: Optional[RGBDImage]) -> Path:
        name = image.name if image is not None and image.name else "scene"
        return self.directory / f"{name}.kfea"

    def features_for_scene(self, image: Optional[RGBDImage], cloud: PointCloud) -> np.ndarray:
        rows = formats.read_features(self.path_for(image))
        if len(rows) != len(cloud):
            raise IndexMismatch(f"{self.path_for(image)} has {len(rows)} rows for {len(cloud)} points")
        return rows


class MissingFeatureProvider(VisualFeatureProvider):
    """Stand-in used when no feature source is configured."""

    dim = VISUAL_DIM

    def features_for_scene(self, image: Optional[RGBDImage], cloud: PointCloud) -> np.ndarray:
        raise MissingFeatureFile("No visual feature source configured for this scene.")


def build_provider(config: FeatureConfig, feature_dir: Path | None = None) -> VisualFeatureProvider:
    if config.provider == "procedural":
        return ProceduralFeatureProvider(dim=config.visual_dim, seed=config.visual_seed)
    if config.provider == "file":
        if feature_dir is None or not Path(feature_dir).is_dir():
            return MissingFeatureProvider()
        return FileFeatureProvider(feature_dir, dim=config.visual_dim)
    if config.provider == "none":
        return MissingFeatureProvider()
    raise ValueError(f"Unknown feature provider '{config.provider}'")


def featurize_cloud(
    cloud: PointCloud,
    provider: VisualFeatureProvider,
    fpfh_radius: float,
    image: Optional[RGBDImage] = None,
    name: str = "",
) -> FeaturedScene:
    visual = provider.features_for_scene(image, cloud)
    geometric = compute_fpfh(cloud, fpfh_radius)
    return FeaturedScene(cloud=cloud, field=FeatureField(visual, geometric), image=image, name=name)


def featurize_image(image: RGBDImage, provider: VisualFeatureProvider, config: FeatureConfig) -> FeaturedScene:
    """RGBD image -> point cloud -> featured scene."""
    cloud = cloud_from_rgbd(image, config.stride)
    return featurize_cloud(cloud, provider, config.fpfh_radius, image=image, name=image.name)
