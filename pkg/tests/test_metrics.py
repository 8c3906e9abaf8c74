import math

import pandas as pd
import pytest

from src import metrics
from src.inference import TaskResult


def _make_df():
    return pd.DataFrame(
        {
            "task": [0, 1, 2, 3],
            "seed": [10, 11, 12, 13],
            "variation": ["pose", "pose", "view", "view"],
            "rounds": [1, 5, 2, 1],
            "keypoints": [5, 0, 4, 3],
            "detection_rate": [1.0, 0.4, 0.8, 0.6],
            "endpoint_error": [0.02, float("nan"), 0.05, 0.01],
            "endpoint_error_fraction": [0.01, float("nan"), 0.025, 0.005],
            "plan_feasible": [True, False, True, True],
            "chosen_index": [0, -1, 2, 1],
            "status": ["ok", "distill_failed: exhausted_rounds", "ok", "ok"],
            "seconds": [3.0, 1.0, 2.5, 2.0],
        }
    )


def test_summary_kpis():
    kpis = metrics.summary_kpis(_make_df())
    assert kpis["tasks"] == 4
    assert kpis["distilled"] == 3
    assert kpis["success_rate"] == pytest.approx(0.75)
    assert kpis["mean_detection_rate"] == pytest.approx(0.7)
    assert kpis["mean_endpoint_error"] == pytest.approx(0.08 / 3)
    assert kpis["mean_endpoint_error_fraction"] == pytest.approx(0.04 / 3)
    assert kpis["worst_task"] == 1


def test_summary_kpis_empty():
    kpis = metrics.summary_kpis(pd.DataFrame())
    assert kpis["tasks"] == 0
    assert kpis["success_rate"] == 0.0
    assert kpis["mean_endpoint_error"] is None
    assert kpis["worst_task"] is None


def test_worst_task_prefers_failures_then_error():
    df = _make_df()
    worst = metrics.worst_task(df)
    assert worst["task"] == 1
    assert worst["endpoint_error"] is None
    assert worst["status"].startswith("distill_failed")

    feasible_only = df[df["plan_feasible"]]
    worst = metrics.worst_task(feasible_only)
    assert worst["task"] == 2
    assert worst["endpoint_error"] == pytest.approx(0.05)

    assert metrics.worst_task(pd.DataFrame())["reason"] == "No data"


def test_worst_task_tie_breaks_on_detection_then_task():
    df = pd.DataFrame(
        {
            "task": [4, 2, 3],
            "detection_rate": [0.5, 0.5, 0.2],
            "plan_feasible": [False, False, False],
        }
    )
    assert metrics.worst_task(df)["task"] == 3
    df.loc[df["task"] == 3, "detection_rate"] = 0.5
    assert metrics.worst_task(df)["task"] == 2


def test_variation_standings():
    standings = metrics.calculate_variation_standings(_make_df())
    assert list(standings["variation"]) == ["view", "pose"]
    view = standings.iloc[0]
    assert view["tasks"] == 2
    assert view["success_rate"] == pytest.approx(1.0)
    assert view["mean_endpoint_error"] == pytest.approx(0.03)
    assert view["median_endpoint_error"] == pytest.approx(0.03)
    pose = standings.iloc[1]
    assert pose["success_rate"] == pytest.approx(0.5)
    assert pose["mean_rounds"] == pytest.approx(3.0)
    assert metrics.calculate_variation_standings(pd.DataFrame()).empty


def test_running_success():
    running = metrics.running_success(_make_df().iloc[::-1])
    assert list(running["task"]) == [0, 1, 2, 3]
    assert list(running["success_rate"]) == pytest.approx([1.0, 0.5, 2 / 3, 0.75])


def test_results_frame_from_task_results():
    results = [
        TaskResult(task=1, seed=8, variation="all", keypoints=4, detection_rate=0.5, endpoint_error=0.1, plan_feasible=True),
        TaskResult(task=0, seed=7, variation="all", status="all_keypoints_null"),
    ]
    frame = metrics.results_frame(results)
    assert list(frame["task"]) == [0, 1]
    assert list(frame["plan_feasible"]) == [False, True]
    assert math.isnan(frame.loc[0, "endpoint_error"])
    assert metrics.results_frame([]).empty


def test_format_report():
    text = metrics.format_report(_make_df())
    assert "tasks: 4" in text
    assert "success rate: 0.750" in text
    assert "mean endpoint error: 0.0267 m" in text
    assert "worst task: 1" in text
    assert "view" in text

    empty = metrics.format_report(pd.DataFrame())
    assert "mean endpoint error: n/a" in empty
    assert "worst task" not in empty
