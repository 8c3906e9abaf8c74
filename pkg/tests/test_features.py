import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from src import features, formats
from src.config import FeatureConfig
from src.errors import IndexMismatch, MissingFeatureFile, ZeroVector
from src.geometry import Camera, CameraIntrinsics, PointCloud, RGBDImage, RigidTransform


def _make_surface(seed=0, n=20):
    rng = np.random.default_rng(seed)
    xs, ys = np.meshgrid(np.linspace(-0.1, 0.1, n), np.linspace(-0.1, 0.1, n))
    zs = 0.03 * np.sin(20 * xs) * np.cos(15 * ys)
    points = np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])
    return points + rng.normal(scale=0.001, size=points.shape)


def _make_field(n=30, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    return features.FeatureField(rng.normal(size=(n, dim)), rng.uniform(0, 1, size=(n, 33)))


def test_fpfh_blocks_sum_to_100_or_zero():
    points = np.vstack([_make_surface(), [[5.0, 5.0, 5.0]]])
    cloud = PointCloud(points, viewpoint=np.array([0.0, 0.0, 1.0]))
    fpfh = features.compute_fpfh(cloud, 0.03)
    assert fpfh.shape == (len(points), 33)
    sums = fpfh.reshape(len(points), 3, 11).sum(axis=2)
    nonzero = fpfh.any(axis=1)
    assert np.allclose(sums[nonzero], 100.0)
    assert not nonzero[-1]
    assert nonzero[:-1].mean() > 0.9


def test_fpfh_is_rigid_invariant():
    points = _make_surface(seed=4)
    viewpoint = np.array([0.05, -0.02, 1.0])
    transform = RigidTransform(Rotation.from_euler("xyz", [20, -35, 70], degrees=True).as_matrix(), [0.4, -1.2, 0.7])

    original = features.compute_fpfh(PointCloud(points, viewpoint=viewpoint), 0.03)
    moved = features.compute_fpfh(
        PointCloud(transform.apply(points), viewpoint=transform.apply(viewpoint)), 0.03
    )
    assert np.allclose(original, moved, atol=1e-6)


def test_fpfh_rejects_bad_radius_and_handles_empty():
    with pytest.raises(ValueError):
        features.compute_fpfh(PointCloud(np.zeros((3, 3))), 0.0)
    assert features.compute_fpfh(PointCloud(np.zeros((0, 3))), 0.05).shape == (0, 33)


def test_isolated_points_get_zero_rows():
    cloud = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]]))
    assert not features.compute_fpfh(cloud, 0.1).any()


def test_cosine_and_combined_similarity():
    a = np.array([1.0, 0.0])
    b = np.array([1.0, 1.0])
    assert features.cosine_similarity(a, b) == pytest.approx(1 / np.sqrt(2))
    weights = features.SimilarityWeights(0.75, 0.25)
    value = features.combined_similarity(a, a, b, a, weights)
    assert value == pytest.approx(0.75 / np.sqrt(2) + 0.25)
    with pytest.raises(ZeroVector):
        features.cosine_similarity(a, np.zeros(2))
    with pytest.raises(ValueError):
        features.SimilarityWeights(-0.1, 1.0)


def test_similarity_matrix_matches_pairwise():
    field = _make_field()
    refs_vis = field.visual[[3, 7]] + 0.1
    refs_geo = field.geometric[[3, 7]]
    weights = features.SimilarityWeights(0.6, 0.4)
    matrix = features.similarity_matrix(field, refs_vis, refs_geo, weights)
    assert matrix.shape == (2, 30)
    for m in range(2):
        for i in range(30):
            expected = features.combined_similarity(refs_vis[m], refs_geo[m], field.visual[i], field.geometric[i], weights)
            assert matrix[m, i] == pytest.approx(expected, abs=1e-12)


def test_similarity_matrix_zero_rows_score_zero_for_that_channel():
    field = _make_field(n=4)
    field.geometric[2] = 0.0
    weights = features.SimilarityWeights(0.75, 0.25)
    matrix = features.similarity_matrix(field, field.visual[[2]], np.ones((1, 33)), weights)
    assert matrix[0, 2] == pytest.approx(0.75)


def test_feature_field_and_scene_alignment():
    with pytest.raises(IndexMismatch):
        features.FeatureField(np.zeros((3, 4)), np.zeros((2, 33)))
    field = _make_field(n=3)
    with pytest.raises(IndexMismatch):
        features.FeaturedScene(PointCloud(np.zeros((4, 3))), field)


def test_usable_excludes_zero_rows():
    field = _make_field(n=5)
    field.visual[1] = 0.0
    field.geometric[3] = 0.0
    scene = features.FeaturedScene(PointCloud(np.random.default_rng(0).normal(size=(5, 3))), field)
    assert list(scene.usable) == [True, False, True, False, True]
    assert list(field.degenerate) == [False, False, False, True, False]


def test_procedural_provider_is_deterministic_per_point():
    colors = np.array([[200, 10, 10], [10, 200, 10], [200, 10, 10]], dtype=np.uint8)
    normal_z = np.array([1.0, 0.2, 1.0])
    a = features.ProceduralFeatureProvider(dim=64, seed=7).encode(colors, normal_z)
    b = features.ProceduralFeatureProvider(dim=64, seed=7).encode(colors, normal_z)
    assert a.shape == (3, 64)
    assert np.array_equal(a, b)
    assert np.allclose(a[0], a[2], rtol=0, atol=1e-12)
    assert not np.allclose(a[0], a[1])
    other = features.ProceduralFeatureProvider(dim=64, seed=8).encode(colors, normal_z)
    assert not np.allclose(a, other)


def test_procedural_provider_needs_colors():
    provider = features.ProceduralFeatureProvider()
    with pytest.raises(MissingFeatureFile):
        provider.features_for_scene(None, PointCloud(np.zeros((2, 3))))


def _make_image(name="obs"):
    camera = Camera(CameraIntrinsics(50.0, 50.0, 5.5, 4.5), RigidTransform.identity())
    color = np.full((10, 12, 3), 120, dtype=np.uint8)
    color[:, 6:] = (20, 200, 40)
    yy, xx = np.mgrid[0:10, 0:12]
    depth = (1.0 + 0.002 * xx * yy).astype(np.float32)
    return RGBDImage(color, depth, camera, name=name)


def test_file_provider_reads_sidecar(tmp_path):
    image = _make_image()
    rows = np.random.default_rng(1).normal(size=(120, 8))
    formats.write_features(tmp_path / "obs.kfea", rows)
    provider = features.build_provider(FeatureConfig(provider="file", visual_dim=8, stride=1), tmp_path)
    scene = features.featurize_image(image, provider, FeatureConfig(stride=1, fpfh_radius=0.05))
    assert scene.field.visual.shape == (120, 8)
    assert np.allclose(scene.field.visual, rows.astype(np.float32))
    assert scene.name == "obs"

    with pytest.raises(IndexMismatch):
        features.featurize_image(image, provider, FeatureConfig(stride=2, fpfh_radius=0.05))
    with pytest.raises(MissingFeatureFile):
        features.featurize_image(_make_image("other"), provider, FeatureConfig(stride=1))


def test_build_provider_fallbacks(tmp_path):
    missing = features.build_provider(FeatureConfig(provider="file"), tmp_path / "nowhere")
    assert isinstance(missing, features.MissingFeatureProvider)
    with pytest.raises(MissingFeatureFile):
        missing.features_for_scene(None, PointCloud(np.zeros((1, 3))))
    assert isinstance(features.build_provider(FeatureConfig(provider="none")), features.MissingFeatureProvider)
    with pytest.raises(ValueError):
        features.build_provider(FeatureConfig(provider="clip"))


def test_featurize_image_procedural_shapes():
    image = _make_image()
    config = FeatureConfig(stride=2, fpfh_radius=0.05)
    scene = features.featurize_image(image, features.build_provider(config), config)
    assert len(scene) == 30
    assert scene.field.visual.shape == (30, config.visual_dim)
    assert scene.field.geometric.shape == (30, 33)
    assert scene.image is image
