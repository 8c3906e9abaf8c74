import json

import numpy as np
import pandas as pd
import pytest

from src import backends, cli, formats, inference, keypoints, planner, policy, synthetic
from src.config import DetectionConfig, ProposalConfig, SyntheticConfig
from src.errors import (
    AllKeypointsNull,
    BackendError,
    ConfigError,
    DistillationFailed,
    FormatError,
    InferenceFailed,
    MissingFeatureFile,
    ParseError,
    StartInCollision,
)
from src.geometry import rot6d_encode


@pytest.fixture(scope="module")
def skill_dir(tmp_path_factory):
    task = synthetic.generate_synthetic_task(5, SyntheticConfig(n_demos=2))
    return synthetic.write_task(task, tmp_path_factory.mktemp("skill") / "box"), task


def test_usage_errors_exit_2(tmp_path):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["fly"]) == cli.EXIT_USAGE
    assert cli.main(["distill", "--skill", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["--help"]) == cli.EXIT_OK


def test_infer_with_missing_model_exits_2(tmp_path):
    code = cli.main(
        [
            "infer",
            "--scene", str(tmp_path),
            "--skill", str(tmp_path / "skill.kskill"),
            "--model", str(tmp_path / "absent.kdif"),
            "--world", str(tmp_path / "world.txt"),
            "--out", str(tmp_path / "plan.csv"),
        ]
    )
    assert code == cli.EXIT_USAGE
    assert not (tmp_path / "plan.csv").exists()


def test_bad_config_exits_2(tmp_path):
    config = tmp_path / "bad.toml"
    config.write_text("[planner]\nstep = 'far'\n")
    code = cli.main(["--config", str(config), "train", "--skill", "x.kskill", "--demos", str(tmp_path), "--out", "m.kdif"])
    assert code == cli.EXIT_USAGE


@pytest.mark.parametrize(
    "error, expected",
    [
        (DistillationFailed("no part"), cli.EXIT_TASK_FAILED),
        (InferenceFailed("no sample"), cli.EXIT_TASK_FAILED),
        (AllKeypointsNull("none"), cli.EXIT_TASK_FAILED),
        (BackendError("down"), cli.EXIT_BACKEND),
        (ParseError("garbled", kind="missing_block"), cli.EXIT_BACKEND),
        (ConfigError("bad key"), cli.EXIT_USAGE),
        (FormatError("bad magic"), cli.EXIT_USAGE),
        (FileNotFoundError("gone"), cli.EXIT_USAGE),
        (MissingFeatureFile("no sidecar"), cli.EXIT_USAGE),
        (ValueError("unknown feature provider"), cli.EXIT_USAGE),
        (StartInCollision("start inside a box"), cli.EXIT_TASK_FAILED),
    ],
)
def test_exit_code_for(error, expected):
    assert cli.exit_code_for(error) == expected


def test_eval_synthetic_writes_reports(tmp_path, monkeypatch):
    def fake_task(task_index, seed, settings, scenario):
        feasible = task_index % 2 == 0
        return inference.TaskResult(
            task=task_index,
            seed=seed + task_index,
            variation=settings.synthetic.variation,
            keypoints=4,
            detection_rate=0.75,
            endpoint_error=0.02 if feasible else float("nan"),
            endpoint_error_fraction=0.01 if feasible else float("nan"),
            plan_feasible=feasible,
            status="ok" if feasible else "infer_failed: exhausted",
        )

    monkeypatch.setattr(inference, "evaluate_synthetic_task", fake_task)
    report = tmp_path / "out" / "report.txt"
    code = cli.main(["eval-synthetic", "--seed", "3", "--n-tasks", "4", "--variation", "pose", "--report", str(report)])
    assert code == cli.EXIT_OK
    assert "success rate: 0.500" in report.read_text()
    frame = pd.read_csv(report.with_suffix(".csv"))
    assert list(frame["task"]) == [0, 1, 2, 3]
    assert list(frame["seed"]) == [3, 4, 5, 6]
    assert set(frame["variation"]) == {"pose"}


def test_eval_synthetic_exits_1_when_nothing_succeeds(tmp_path, monkeypatch):
    monkeypatch.setattr(
        inference,
        "evaluate_synthetic_task",
        lambda i, seed, settings, scenario: inference.TaskResult(task=i, seed=seed + i, variation="all", status="all_keypoints_null"),
    )
    code = cli.main(["eval-synthetic", "--n-tasks", "2", "--report", str(tmp_path / "report.txt")])
    assert code == cli.EXIT_TASK_FAILED


def test_distill_then_replay_reproduces_the_skill(skill_dir, tmp_path):
    root, _ = skill_dir
    first = tmp_path / "first.kskill"
    transcript = tmp_path / "first.jsonl"
    code = cli.main(["distill", "--skill", str(root), "--backend", "scripted", "--out", str(first), "--transcript-out", str(transcript)])
    assert code == cli.EXIT_OK
    assert transcript.read_text().strip()

    second = tmp_path / "second.kskill"
    code = cli.main(["replay", "--transcript", str(transcript), "--skill", str(root), "--out", str(second)])
    assert code == cli.EXIT_OK
    assert second.read_text() == first.read_text()


def test_distill_with_only_bad_proposals_exits_1(skill_dir, tmp_path):
    root, task = skill_dir
    scenario = tmp_path / "all_bad.json"
    scenario.write_text(json.dumps(synthetic.build_synthetic_scenario(task, "all_bad")))
    out = tmp_path / "skill.kskill"
    code = cli.main(["distill", "--skill", str(root), "--backend", "scripted", "--scenario", str(scenario), "--out", str(out)])
    assert code == cli.EXIT_TASK_FAILED
    assert not out.exists()


def test_unknown_feature_provider_exits_2(skill_dir, tmp_path):
    root, _ = skill_dir
    config = tmp_path / "sift.toml"
    config.write_text("[features]\nprovider = 'sift'\n")
    out = tmp_path / "skill.kskill"
    code = cli.main(["--config", str(config), "distill", "--skill", str(root), "--backend", "scripted", "--out", str(out)])
    assert code == cli.EXIT_USAGE
    assert not out.exists()


def _write_scene_dir(task, directory, world=None):
    held = synthetic.held_out_scene(task)
    directory.mkdir()
    formats.write_rgbd(directory / cli.SCENE_STEM, held.image)
    planner.write_world(directory / "world.txt", world or held.world)
    entry = synthetic.coarse_region_entry(held)
    (directory / cli.SCENARIO_FILE).write_text(json.dumps([entry]))
    return held, entry


def _region_of(held, entry):
    height, width = held.labels.shape
    config = ProposalConfig()
    rects = backends.grid_cells(backends.GridSpec(config.grid_rows, config.grid_cols), width, height)
    return backends.cell_mask(entry["cells"], rects, (height, width))


def test_infer_with_scripted_backend_discounts_outside_the_region(skill_dir, tmp_path, monkeypatch):
    _, task = skill_dir
    held, entry = _write_scene_dir(task, tmp_path / "scene")
    seen = {}

    def fake_infer(scene, skill, params, world, settings, start_rotation=None, mask_weights=None):
        seen["scene"], seen["weights"] = scene, mask_weights
        poses = np.zeros((3, 10))
        poses[:, 0:3] = settings.infer.start_position
        poses[:, 3:9] = rot6d_encode(np.eye(3))
        return inference.InferencePlan(
            approach=poses[:1],
            execution=policy.TrajectorySample(poses),
            chosen_index=0,
            diagnostics=[inference.SampleVerdict(0, True, "ok", list(poses[0, 0:3]), 0.0)],
            detections={"kp_00": keypoints.DetectionResult(scene.points[0].copy(), 0.9, 1.0, 0)},
        )

    monkeypatch.setattr(policy, "load_params", lambda path: "params")
    monkeypatch.setattr(keypoints, "load_skill", lambda path: "skill")
    monkeypatch.setattr(inference, "infer", fake_infer)
    plan = tmp_path / "plan.csv"
    code = cli.main(
        [
            "infer",
            "--scene", str(tmp_path / "scene"),
            "--skill", "skill.kskill",
            "--model", "model.kdif",
            "--world", str(tmp_path / "scene" / "world.txt"),
            "--out", str(plan),
            "--backend", "scripted",
        ]
    )
    assert code == cli.EXIT_OK

    scene, weights = seen["scene"], seen["weights"]
    u, v = scene.cloud.pixels[:, 0], scene.cloud.pixels[:, 1]
    inside = _region_of(held, entry)[v, u]
    assert np.all(weights[inside] == 1.0)
    assert np.all(weights[~inside] == DetectionConfig().mask_discount)
    assert (~inside).any()
    sidecar = json.loads(plan.with_suffix(".json").read_text())
    assert sidecar["detections"]["kp_00"]["matched"] is True


@pytest.mark.slow
def test_train_and_infer_from_the_command_line(skill_dir, tmp_path):
    root, task = skill_dir
    config = tmp_path / "fast.toml"
    config.write_text("[train]\nsteps = 300\nhorizon = 16\nlog_every = 0\n")
    skill = tmp_path / "skill.kskill"
    model = tmp_path / "model.kdif"
    assert cli.main(["--config", str(config), "distill", "--skill", str(root), "--backend", "scripted", "--out", str(skill)]) == 0
    assert cli.main(["--config", str(config), "train", "--skill", str(skill), "--demos", str(root), "--out", str(model)]) == 0

    open_world = planner.SceneWorld(planner.Box([-2.0, -2.0, -1.0], [2.0, 2.0, 2.0]))
    scene_dir = tmp_path / "scene"
    _write_scene_dir(task, scene_dir, world=open_world)
    plan = tmp_path / "plan.csv"
    code = cli.main(
        [
            "--config", str(config),
            "infer",
            "--scene", str(scene_dir),
            "--skill", str(skill),
            "--model", str(model),
            "--world", str(scene_dir / "world.txt"),
            "--out", str(plan),
            "--backend", "scripted",
        ]
    )
    assert code == cli.EXIT_OK
    _, poses = formats.read_trajectory(plan)
    assert poses.shape[1] == 10
    sidecar = json.loads(plan.with_suffix(".json").read_text())
    assert any(d["matched"] for d in sidecar["detections"].values())
    assert sidecar["diagnostics"][sidecar["chosen_index"]]["feasible"]
