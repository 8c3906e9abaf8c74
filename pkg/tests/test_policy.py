import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from src import policy
from src.config import TrainConfig
from src.errors import AllKeypointsNull, DimensionMismatch, FormatError, ShapeMismatch
from src.geometry import rot6d_decode, rot6d_encode

TINY = TrainConfig(
    horizon=8, diffusion_steps=10, hidden_width=16, residual_blocks=1, steps=200, batch_size=4, log_every=0
)


def _make_found(shift=(0.0, 0.0, 0.0), seed=0):
    rng = np.random.default_rng(seed)
    return {
        kid: (rng.normal(size=3) * 0.05 + np.asarray(shift), rng.normal(size=4), rng.uniform(size=3))
        for kid in ("kp_01", "kp_00")
    }


def _make_poses(horizon=8, seed=0):
    rng = np.random.default_rng(seed)
    positions = np.cumsum(rng.normal(scale=0.02, size=(horizon, 3)), axis=0)
    rotations = Rotation.random(horizon, random_state=seed).as_matrix()
    grip = np.linspace(0.0, 1.0, horizon)
    return np.column_stack([positions, rot6d_encode(rotations), grip])


def _make_dataset(n=4):
    dataset = []
    for i in range(n):
        condition = policy.build_condition(["kp_00", "kp_01"], _make_found(seed=i))
        dataset.append((condition, policy.TrajectorySample(_make_poses(seed=i), condition.centroid)))
    return dataset


@pytest.fixture(scope="module")
def trained():
    return policy.train(_make_dataset(), TINY)


def test_trajectory_sample_validation():
    with pytest.raises(ShapeMismatch):
        policy.TrajectorySample(np.zeros((5, 9)))
    with pytest.raises(ShapeMismatch):
        policy.TrajectorySample(np.zeros((1, 10)))
    with pytest.raises(ValueError):
        policy.TrajectorySample(np.full((3, 10), np.nan))


def test_object_frame_round_trip():
    traj = policy.TrajectorySample(_make_poses())
    kps = np.array([[0.1, 0.2, 0.3], [0.3, 0.2, 0.1]])
    relative = policy.to_object_frame(traj, kps)
    assert np.allclose(relative.centroid, [0.2, 0.2, 0.2])
    assert np.allclose(relative.positions, traj.positions - [0.2, 0.2, 0.2])
    assert np.array_equal(relative.rot6d, traj.rot6d)
    back = policy.to_world_frame(relative)
    assert not back.object_relative
    assert np.allclose(back.poses, traj.poses)
    with pytest.raises(ValueError):
        policy.to_object_frame(relative, kps)
    with pytest.raises(ValueError):
        policy.to_object_frame(traj, np.zeros((0, 3)))


def test_resample_keeps_endpoints_and_spacing():
    poses = _make_poses(horizon=2)
    poses[:, 0:3] = [[0.0, 0.0, 0.0], [0.9, 0.0, 0.0]]
    poses[1, 3:9] = poses[0, 3:9]
    out = policy.resample_trajectory(poses, 10)
    assert out.shape == (10, 10)
    assert np.allclose(out[:, 0], np.linspace(0.0, 0.9, 10))
    assert np.allclose(out[[0, -1]], poses[[0, -1]])

    wiggly = _make_poses(horizon=13, seed=3)
    resampled = policy.resample_trajectory(wiggly, 48)
    assert np.allclose(resampled[0], wiggly[0])
    assert np.allclose(resampled[-1], wiggly[-1])
    rotations = rot6d_decode(resampled[:, 3:9])
    assert np.allclose(np.einsum("nji,njk->nik", rotations, rotations), np.eye(3), atol=1e-9)


def test_resample_stationary_path_uses_index_spacing():
    poses = np.tile(_make_poses(horizon=2)[0], (3, 1))
    poses[:, 9] = [0.0, 1.0, 0.0]
    out = policy.resample_trajectory(poses, 5)
    assert np.allclose(out[:, 9], [0.0, 0.5, 1.0, 0.5, 0.0])
    with pytest.raises(ShapeMismatch):
        policy.resample_trajectory(poses[:1], 5)


def test_build_condition_orders_and_fills():
    found = _make_found()
    condition = policy.build_condition(["kp_02", "kp_01", "kp_00"], found)
    assert condition.keypoint_ids == ("kp_00", "kp_01", "kp_02")
    assert condition.filled == (False, False, True)
    centroid = (found["kp_00"][0] + found["kp_01"][0]) / 2
    assert np.allclose(condition.centroid, centroid)
    assert np.allclose(condition.positions[0], found["kp_00"][0] - centroid)
    assert np.allclose(condition.positions[2], 0.0)
    assert np.allclose(condition.visual[2], (found["kp_00"][1] + found["kp_01"][1]) / 2)
    assert condition.vector().size == 3 * (3 + 4 + 3)


def test_build_condition_errors():
    with pytest.raises(AllKeypointsNull):
        policy.build_condition(["kp_00"], {})
    found = _make_found()
    found["kp_01"] = (found["kp_01"][0], np.ones(5), found["kp_01"][2])
    with pytest.raises(DimensionMismatch):
        policy.build_condition(["kp_00", "kp_01"], found)


def test_normalization_maps_to_unit_box():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(6, 8, 3)) * [1.0, 5.0, 0.0] + [0.0, 2.0, 7.0]
    stats = policy.NormalizationStats.fit(data)
    normalized = stats.normalize(data)
    assert normalized[..., :2].min() == pytest.approx(-1.0)
    assert normalized[..., :2].max() == pytest.approx(1.0)
    assert np.allclose(normalized[..., 2], 0.0)
    assert np.allclose(stats.denormalize(normalized), data)
    again = policy.NormalizationStats.from_dict(stats.to_dict())
    assert np.array_equal(again.scale, stats.scale)


def test_cosine_schedule_shape():
    schedule = policy.NoiseSchedule.cosine(100)
    assert schedule.steps == 100
    assert np.all(schedule.betas > 0)
    assert np.all(schedule.betas <= 0.999)
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert schedule.alpha_bars[0] > 0.99
    assert schedule.alpha_bars[-1] < 1e-3


def test_forward_noise_statistics():
    schedule = policy.NoiseSchedule.cosine(100)
    generator = torch.Generator().manual_seed(0)
    x0 = torch.ones(200_000, dtype=torch.float64)
    noise = torch.randn(200_000, generator=generator, dtype=torch.float64)
    x_t = policy.forward_noise(x0, 50, schedule, noise)
    alpha_bar = schedule.alpha_bars[50]
    assert float(x_t.mean()) == pytest.approx(np.sqrt(alpha_bar), abs=0.01)
    assert float(x_t.var()) == pytest.approx(1 - alpha_bar, abs=0.01)

    batch = torch.zeros((3, 4, 10))
    steps = torch.tensor([0, 5, 9])
    out = policy.forward_noise(batch, steps, policy.NoiseSchedule.cosine(10), torch.ones_like(batch))
    expected = np.sqrt(1 - policy.NoiseSchedule.cosine(10).alpha_bars[[0, 5, 9]])
    assert np.allclose(out[:, 0, 0].numpy(), expected, atol=1e-6)

    with pytest.raises(ValueError):
        policy.forward_noise(x0, 100, schedule, noise)
    with pytest.raises(ShapeMismatch):
        policy.forward_noise(x0, 3, schedule, noise[:10])


def test_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = policy.TemporalDenoiser(10, 6, width=8, blocks=1).double()
    schedule = policy.NoiseSchedule.cosine(10)
    x0 = torch.randn((2, 6, 10), dtype=torch.float64)
    noise = torch.randn((2, 6, 10), dtype=torch.float64)
    t = torch.tensor([2, 7])
    condition = torch.randn((2, 6), dtype=torch.float64, requires_grad=True)

    def loss(c):
        return policy.loss_for_batch(model, schedule, x0, c, t, noise)

    assert torch.autograd.gradcheck(loss, (condition,), eps=1e-6, atol=1e-5)


def test_denoiser_output_shape():
    model = policy.TemporalDenoiser(10, 20, width=16, blocks=2)
    out = model(torch.zeros((3, 8, 10)), torch.tensor([0.0, 4.0, 9.0]), torch.zeros((3, 20)))
    assert out.shape == (3, 8, 10)


def test_training_lowers_loss(trained):
    report = trained.loss_report
    assert report["steps"] == TINY.steps
    assert report["final_loss"] < report["initial_loss"]
    assert trained.keypoint_ids == ("kp_00", "kp_01")
    assert trained.condition_dim == 20


def test_train_rejects_bad_datasets():
    with pytest.raises(ValueError):
        policy.train([], TINY)
    condition = policy.build_condition(["kp_00", "kp_01"], _make_found())
    with pytest.raises(ValueError):
        policy.train([(condition, policy.TrajectorySample(_make_poses()))], TINY)
    with pytest.raises(ShapeMismatch):
        policy.train([(condition, policy.TrajectorySample(_make_poses(horizon=6), condition.centroid))], TINY)
    other = policy.build_condition(["kp_00"], {"kp_00": _make_found()["kp_00"]})
    mixed = _make_dataset(1) + [(other, policy.TrajectorySample(_make_poses(), other.centroid))]
    with pytest.raises(DimensionMismatch):
        policy.train(mixed, TINY)


def test_sampling_is_seeded(trained):
    condition = policy.build_condition(["kp_00", "kp_01"], _make_found(seed=9))
    a = policy.sample(trained, condition, 3, seed=4)
    b = policy.sample(trained, condition, 3, seed=4)
    c = policy.sample(trained, condition, 3, seed=5)
    assert len(a) == 3
    assert all(s.horizon == TINY.horizon and s.object_relative for s in a)
    assert all(np.array_equal(x.poses, y.poses) for x, y in zip(a, b))
    assert not np.allclose(a[0].poses, c[0].poses)
    assert policy.sample(trained, condition, 0, seed=4) == []


def test_sampling_is_translation_equivariant(trained):
    shift = np.array([0.4, -0.25, 0.1])
    here = policy.build_condition(["kp_00", "kp_01"], _make_found(seed=9))
    there = policy.build_condition(["kp_00", "kp_01"], _make_found(shift=shift, seed=9))
    a = policy.to_world_frame(policy.sample(trained, here, 2, seed=1)[0])
    b = policy.to_world_frame(policy.sample(trained, there, 2, seed=1)[0])
    assert np.allclose(b.positions - a.positions, shift, atol=1e-4)
    assert np.allclose(b.rot6d, a.rot6d, atol=1e-4)


def test_sampling_checks_condition(trained):
    wrong_ids = policy.build_condition(["kp_00", "kp_05"], {"kp_00": _make_found()["kp_00"], "kp_05": _make_found()["kp_01"]})
    with pytest.raises(DimensionMismatch):
        policy.sample(trained, wrong_ids, 1, seed=0)
    found = {k: (p, np.ones(6), g) for k, (p, _, g) in _make_found().items()}
    with pytest.raises(DimensionMismatch):
        policy.sample(trained, policy.build_condition(["kp_00", "kp_01"], found), 1, seed=0)


def test_checkpoint_round_trip(tmp_path, trained):
    path = tmp_path / "policy.kdif"
    policy.save_params(path, trained)
    loaded = policy.load_params(path)
    assert loaded.keypoint_ids == trained.keypoint_ids
    assert loaded.config == trained.config
    assert loaded.visual_dim == 4 and loaded.geometric_dim == 3
    assert loaded.loss_report == trained.loss_report
    condition = policy.build_condition(["kp_00", "kp_01"], _make_found(seed=2))
    a = policy.sample(trained, condition, 2, seed=3)
    b = policy.sample(loaded, condition, 2, seed=3)
    assert all(np.array_equal(x.poses, y.poses) for x, y in zip(a, b))


def test_checkpoint_errors(tmp_path, trained):
    with pytest.raises(FileNotFoundError):
        policy.load_params(tmp_path / "absent.kdif")
    path = tmp_path / "policy.kdif"
    policy.save_params(path, trained)
    raw = path.read_bytes()

    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        policy.load_params(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        policy.load_params(path)
    path.write_bytes(raw + b"\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        policy.load_params(path)
    path.write_bytes(raw[:10])
    with pytest.raises(FormatError):
        policy.load_params(path)
