from typing import List, Tuple

import numpy as np
import pandas as pd

from .config import REPORT_COLUMNS, TRAJECTORY_COLUMNS


def detect_trajectory_schema(df: pd.DataFrame) -> str:
    """Detect which column layout a trajectory table follows."""
    cols = {c.lower() for c in df.columns}
    if set(TRAJECTORY_COLUMNS).issubset(cols):
        return "pose_10d"
    if set(TRAJECTORY_COLUMNS[1:]).issubset(cols):
        return "pose_10d_untimed"
    return "unknown"


def normalize_trajectory_df(df: pd.DataFrame) -> Tuple[pd.DataFrame, List[str]]:
    """
    Normalize a trajectory table to the standard columns t, x, y, z, r1..r6, grip.
    Returns the cleaned frame plus a list of problems (empty when usable).
    """
    problems: List[str] = []
    if df is None or df.empty:
        return pd.DataFrame(columns=TRAJECTORY_COLUMNS), ["Trajectory has no rows."]

    working = df.copy()
    working.columns = [str(c).strip().lower() for c in working.columns]

    layout = detect_trajectory_schema(working)
    if layout == "unknown":
        missing = [c for c in TRAJECTORY_COLUMNS[1:] if c not in working.columns]
        return pd.DataFrame(columns=TRAJECTORY_COLUMNS), [f"Missing columns: {', '.join(missing)}"]
    if layout == "pose_10d_untimed":
        working["t"] = np.arange(len(working), dtype=np.float64)

    for col in TRAJECTORY_COLUMNS:
        working[col] = pd.to_numeric(working[col], errors="coerce")
    bad_rows = int(working[TRAJECTORY_COLUMNS].isna().any(axis=1).sum())
    if bad_rows:
        problems.append(f"{bad_rows} row(s) with non-numeric values")
    if len(working) < 2:
        problems.append("A trajectory needs at least 2 poses.")
    if not working["t"].is_monotonic_increasing or working["t"].duplicated().any():
        problems.append("Timestamps must be strictly increasing.")
    if ((working["grip"] < 0) | (working["grip"] > 1)).any():
        problems.append("Gripper values must lie in [0, 1].")

    return working[TRAJECTORY_COLUMNS].reset_index(drop=True), problems


def normalize_report_df(df: pd.DataFrame) -> Tuple[pd.DataFrame, List[str]]:
    """
    Normalize an evaluation report table to REPORT_COLUMNS.
    Unknown columns are dropped; missing optional columns are filled with defaults.
    """
    problems: List[str] = []
    if df is None or df.empty:
        return pd.DataFrame(columns=REPORT_COLUMNS), problems

    working = df.copy()
    working.columns = [str(c).strip().lower() for c in working.columns]
    missing = [c for c in ("task", "detection_rate", "plan_feasible") if c not in working.columns]
    if missing:
        return pd.DataFrame(columns=REPORT_COLUMNS), [f"Missing columns: {', '.join(missing)}"]

    defaults = {"seed": -1, "variation": "unknown", "rounds": 0, "keypoints": 0, "chosen_index": -1, "status": "ok"}
    for col, value in defaults.items():
        if col not in working.columns:
            working[col] = value
    for col in ("endpoint_error", "endpoint_error_fraction", "seconds"):
        if col not in working.columns:
            working[col] = np.nan

    numeric = ["task", "seed", "rounds", "keypoints", "detection_rate", "endpoint_error", "endpoint_error_fraction", "chosen_index", "seconds"]
    for col in numeric:
        working[col] = pd.to_numeric(working[col], errors="coerce")
    if working["task"].isna().any():
        problems.append("Rows without a task number were dropped.")
        working = working.dropna(subset=["task"])
    working["plan_feasible"] = working["plan_feasible"].astype(str).str.strip().str.lower().isin(["true", "1", "yes"])
    working["variation"] = working["variation"].fillna("unknown").astype(str)
    working["status"] = working["status"].fillna("ok").astype(str)
    working["task"] = working["task"].astype(int)

    return working[REPORT_COLUMNS].sort_values("task").reset_index(drop=True), problems
