from dataclasses import asdict
from typing import Iterable

import numpy as np
import pandas as pd

from . import schema
from .config import REPORT_COLUMNS


def results_frame(results: Iterable) -> pd.DataFrame:
    """TaskResult records (or plain dicts) -> report table."""
    rows = [r if isinstance(r, dict) else asdict(r) for r in results]
    if not rows:
        return pd.DataFrame(columns=REPORT_COLUMNS)
    frame, _ = schema.normalize_report_df(pd.DataFrame(rows))
    return frame


def _success_rate(feasible: pd.Series) -> float:
    return float(feasible.mean()) if len(feasible) else 0.0


def calculate_variation_standings(df: pd.DataFrame) -> pd.DataFrame:
    """Aggregate task results by variation."""
    columns = [
        "variation",
        "tasks",
        "success_rate",
        "mean_detection_rate",
        "mean_endpoint_error",
        "median_endpoint_error",
        "mean_rounds",
        "mean_keypoints",
    ]
    if df is None or df.empty:
        return pd.DataFrame(columns=columns)

    grouped = df.groupby("variation", dropna=False)
    standings = grouped.agg(
        tasks=("task", "count"),
        mean_detection_rate=("detection_rate", "mean"),
        mean_endpoint_error=("endpoint_error", "mean"),
        median_endpoint_error=("endpoint_error", "median"),
        mean_rounds=("rounds", "mean"),
        mean_keypoints=("keypoints", "mean"),
    ).reset_index()

    rates = grouped["plan_feasible"].apply(_success_rate).reset_index(name="success_rate")
    standings = standings.merge(rates, on="variation", how="left")
    standings = standings[columns].sort_values(["success_rate", "variation"], ascending=[False, True])
    return standings.reset_index(drop=True)


def summary_kpis(df: pd.DataFrame) -> dict:
    """Headline numbers for the report and the overview page."""
    if df is None or df.empty:
        return {
            "tasks": 0,
            "distilled": 0,
            "success_rate": 0.0,
            "mean_detection_rate": 0.0,
            "mean_endpoint_error": None,
            "mean_endpoint_error_fraction": None,
            "worst_task": None,
        }

    distilled = df["keypoints"] > 0
    errors = df.loc[df["plan_feasible"], "endpoint_error"].dropna()
    fractions = df.loc[df["plan_feasible"], "endpoint_error_fraction"].dropna()
    worst = worst_task(df)
    return {
        "tasks": int(df["task"].nunique()),
        "distilled": int(distilled.sum()),
        "success_rate": _success_rate(df["plan_feasible"]),
        "mean_detection_rate": float(df["detection_rate"].mean()),
        "mean_endpoint_error": float(errors.mean()) if len(errors) else None,
        "mean_endpoint_error_fraction": float(fractions.mean()) if len(fractions) else None,
        "worst_task": worst["task"],
    }


def worst_task(df: pd.DataFrame) -> dict:
    """
    The task that went worst: any failed task beats a feasible one, then the larger
    endpoint error, then the lower detection rate, then the lower task number.
    """
    norm, _ = schema.normalize_report_df(df)
    if norm.empty:
        return {"task": None, "status": None, "endpoint_error": None, "detection_rate": None, "reason": "No data"}

    norm["error_rank"] = norm["endpoint_error"].fillna(np.inf)
    norm = norm.sort_values(
        by=["plan_feasible", "error_rank", "detection_rate", "task"],
        ascending=[True, False, True, True],
        ignore_index=True,
    )
    top = norm.iloc[0]
    error = top["endpoint_error"]
    return {
        "task": int(top["task"]),
        "status": top["status"],
        "endpoint_error": None if pd.isna(error) else float(error),
        "detection_rate": float(top["detection_rate"]),
        "reason": None,
    }


def running_success(df: pd.DataFrame) -> pd.DataFrame:
    """Success rate after each task, in task order, for plotting."""
    if df is None or df.empty:
        return pd.DataFrame(columns=["task", "success_rate", "plan_feasible"])
    temp = df.sort_values("task").copy()
    temp["success_rate"] = temp["plan_feasible"].astype(float).expanding().mean()
    return temp[["task", "success_rate", "plan_feasible"]].reset_index(drop=True)


def format_report(df: pd.DataFrame) -> str:
    """Plain-text evaluation summary."""
    kpis = summary_kpis(df)
    lines = [
        f"tasks: {kpis['tasks']}",
        f"distilled: {kpis['distilled']}",
        f"success rate: {kpis['success_rate']:.3f}",
        f"mean detection rate: {kpis['mean_detection_rate']:.3f}",
    ]
    if kpis["mean_endpoint_error"] is not None:
        lines.append(f"mean endpoint error: {kpis['mean_endpoint_error']:.4f} m ({kpis['mean_endpoint_error_fraction']:.4f} of workspace)")
    else:
        lines.append("mean endpoint error: n/a")
    standings = calculate_variation_standings(df)
    if not standings.empty:
        lines.append("")
        lines.append(standings.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if kpis["worst_task"] is not None:
        lines.append("")
        lines.append(f"worst task: {kpis['worst_task']}")
    return "\n".join(lines) + "\n"
