import json
from pathlib import Path

import streamlit as st

from src import formats, planner, ui
from src.errors import FormatError

ui.apply_centered_layout()

st.title("Plan Viewer")

plan_path = Path(st.text_input("Plan CSV", value="plan.csv"))
world_path = st.text_input("World file (optional)", value="")

try:
    _, poses = formats.read_trajectory(plan_path)
except (FileNotFoundError, FormatError) as exc:
    st.info(f"Could not load a plan: {exc}")
    st.stop()

sidecar_path = plan_path.with_suffix(".json")
sidecar = json.loads(sidecar_path.read_text(encoding="utf-8")) if sidecar_path.exists() else {}
split = int(sidecar.get("approach_length", 0))

world = None
if world_path:
    try:
        world = planner.read_world(Path(world_path))
    except (FileNotFoundError, FormatError) as exc:
        st.warning(f"World not loaded: {exc}")

diagnostics = sidecar.get("diagnostics", [])
ui.render_kpi_cards(
    [
        {"label": "Chosen sample", "value": sidecar.get("chosen_index", "-")},
        {"label": "Samples tried", "value": len(diagnostics) or "-"},
        {"label": "Approach waypoints", "value": split},
        {"label": "Execution poses", "value": len(poses) - split},
    ]
)

ui.plot_plan_3d(world, poses[:split], poses[split:], [d["goal"] for d in diagnostics if not d["feasible"]])

if diagnostics:
    ui.section_header("Sample verdicts")
    st.dataframe(diagnostics, width="stretch")
if sidecar.get("detections"):
    with st.expander("Keypoint detections"):
        st.json(sidecar["detections"])
