import numpy as np
import pandas as pd
import pytest

from src import data, formats, schema
from src.errors import FormatError
from src.geometry import Camera, CameraIntrinsics, RGBDImage, RigidTransform, rot6d_encode


def _make_image(name="", shade=100):
    camera = Camera(CameraIntrinsics(30.0, 30.0, 3.5, 2.5), RigidTransform.identity())
    color = np.full((6, 8, 3), shade, dtype=np.uint8)
    depth = np.full((6, 8), 0.75, dtype=np.float32)
    return RGBDImage(color, depth, camera, name)


def _make_trajectory(n=5):
    poses = np.zeros((n, 10))
    poses[:, 0] = np.linspace(0.0, 0.25, n)
    poses[:, 3:9] = rot6d_encode(np.eye(3))
    poses[:, 9] = np.linspace(1.0, 0.0, n)
    return poses


def _make_bundle(n_demos=2, labels=True):
    demos = tuple(data.Demonstration(_make_image(shade=40 + i), _make_trajectory()) for i in range(n_demos))
    seed_labels = np.zeros((6, 8), dtype=np.uint8) if labels else None
    if seed_labels is not None:
        seed_labels[2:4, 3:6] = 3
    return data.SkillBundle("Open the drawer.", (_make_image(), _make_image(shade=180)), demos, seed_labels)


def test_skill_dir_round_trip(tmp_path):
    bundle = _make_bundle()
    root = data.write_skill_dir(tmp_path / "skill", bundle)
    loaded, report = data.load_skill_dir(root)

    assert report.issues == []
    assert report.demos_loaded == 2
    assert loaded.description == "Open the drawer."
    assert len(loaded.video) == 2
    assert loaded.video[1].color[0, 0, 0] == 180
    assert np.array_equal(loaded.seed_labels, bundle.seed_labels)
    assert loaded.demos[0].observation.name == "demo_00"
    assert np.allclose(loaded.demos[1].trajectory, bundle.demos[1].trajectory, atol=1e-7)
    assert loaded.root == root
    assert loaded.feature_dir == root / "features"


def test_unreadable_demo_is_skipped_and_counted(tmp_path):
    root = data.write_skill_dir(tmp_path / "skill", _make_bundle(n_demos=3))
    (root / "demos" / "demo_01" / "traj.csv").write_text("t,x\n0,0\n")
    loaded, report = data.load_skill_dir(root)
    assert len(loaded.demos) == 2
    assert report.warnings["skipped_demos"] == 1
    assert report.issues[0].startswith("demo_01")


def test_missing_pieces_are_fatal(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.load_skill_dir(tmp_path / "absent")

    root = data.write_skill_dir(tmp_path / "skill", _make_bundle(n_demos=1))
    (root / "description.txt").unlink()
    with pytest.raises(FileNotFoundError):
        data.load_skill_dir(root)

    root = data.write_skill_dir(tmp_path / "skill2", _make_bundle(n_demos=1))
    (root / "demos" / "demo_00" / "obs.kdep").unlink()
    with pytest.raises(FormatError):
        data.load_skill_dir(root)

    root = data.write_skill_dir(tmp_path / "skill3", _make_bundle(n_demos=1))
    for frame in (root / "video").glob("*.ppm"):
        frame.unlink()
    with pytest.raises(FormatError):
        data.load_skill_dir(root)


def test_mismatched_labels_are_dropped_with_an_issue(tmp_path):
    root = data.write_skill_dir(tmp_path / "skill", _make_bundle(labels=False))
    (root / "segmentation").mkdir()
    formats.write_label_png(root / "segmentation" / "frame_0000_labels.png", np.zeros((3, 3), dtype=np.uint8))
    loaded, report = data.load_skill_dir(root)
    assert loaded.seed_labels is None
    assert len(report.issues) == 1


def test_bundle_validation():
    with pytest.raises(ValueError):
        data.SkillBundle("x", (), (data.Demonstration(_make_image(), _make_trajectory()),))
    with pytest.raises(ValueError):
        data.SkillBundle("x", (_make_image(),), ())
    with pytest.raises(ValueError):
        data.Demonstration(_make_image(), _make_trajectory()[:1])
    with pytest.raises(ValueError):
        data.Demonstration(_make_image(), _make_trajectory(), times=np.array([0, 1, 1, 2, 3.0]))


def test_normalize_report_fills_defaults_and_parses_flags():
    raw = pd.DataFrame(
        {
            "Task": [2, None, 1],
            "detection_rate": [0.5, 0.1, "0.75"],
            "plan_feasible": ["yes", "true", "0"],
        }
    )
    norm, problems = schema.normalize_report_df(raw)
    assert list(norm["task"]) == [1, 2]
    assert list(norm["plan_feasible"]) == [False, True]
    assert list(norm["variation"]) == ["unknown", "unknown"]
    assert list(norm["chosen_index"]) == [-1, -1]
    assert norm["endpoint_error"].isna().all()
    assert norm.loc[0, "detection_rate"] == pytest.approx(0.75)
    assert problems == ["Rows without a task number were dropped."]


def test_normalize_report_requires_core_columns():
    norm, problems = schema.normalize_report_df(pd.DataFrame({"task": [1]}))
    assert norm.empty
    assert problems[0].startswith("Missing columns")


def test_load_eval_report(tmp_path):
    frame, report = data.load_eval_report(tmp_path / "missing.csv")
    assert frame.empty
    assert "eval-synthetic" in report.issues[0]

    path = tmp_path / "report.csv"
    pd.DataFrame(
        {
            "task": [0, 1, 2],
            "variation": ["pose", "view", "pose"],
            "detection_rate": [1.0, 0.2, 0.6],
            "plan_feasible": [True, False, True],
            "status": ["ok", "infer_failed: exhausted", "ok"],
        }
    ).to_csv(path, index=False)
    frame, report = data.load_eval_report(path)
    assert len(frame) == 3
    assert report.issues == []
    assert report.warnings == {"failed_tasks": 1}

    path.write_text("")
    frame, report = data.load_eval_report(path)
    assert frame.empty
    assert report.issues[0].startswith("Unreadable report")


def test_apply_report_filters():
    df = pd.DataFrame({"task": [0, 1, 2], "variation": ["pose", "view", "pose"], "status": ["ok", "ok", "all_keypoints_null"]})
    assert list(data.apply_report_filters(df, {"variation": ["pose"]})["task"]) == [0, 2]
    assert list(data.apply_report_filters(df, {"variation": ["pose"], "status": ["ok"]})["task"]) == [0]
    assert data.apply_report_filters(df, {}) is df
    assert list(data.apply_report_filters(df, {"variation": []})["task"]) == [0, 1, 2]
