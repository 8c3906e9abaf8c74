from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st

from . import data, planner
from .config import DEFAULT_REPORT_CSV

THEME = {
    "bg": "#0a0f1c",
    "bg_glow": "radial-gradient(circle at 15% 10%, rgba(45,212,191,0.10), transparent 40%), #0a0f1c",
    "panel": "#111827",
    "border": "rgba(45, 212, 191, 0.30)",
    "text": "#e5e7eb",
    "muted": "#94a3b8",
    "ok": "#2dd4bf",
    "fail": "#fb923c",
    "path": "#38bdf8",
    "execution": "#f472b6",
    "shadow": "0 8px 24px rgba(0,0,0,0.35)",
}
KEYPOINT_COLORS = px.colors.qualitative.Plotly
# below this a rate bar is drawn in the failure colour
RATE_BAR_WARN = 0.5


def apply_centered_layout(max_width: int = 1200) -> None:
    """Dark theme plus the KPI cards, panels, variation table and rate bars."""
    t = THEME
    st.markdown(
        f"""
        <style>
        html, body, [data-testid="stAppViewContainer"] {{
            background: {t['bg_glow']};
            color: {t['text']};
        }}
        [data-testid="stHeader"] {{ background: transparent; }}
        [data-testid="stSidebar"] {{ background: {t['panel']}; }}
        h1, h2, h3, h4, p, span, label, [data-testid="stMarkdownContainer"] {{
            color: {t['text']} !important;
        }}
        a {{ color: {t['ok']} !important; }}
        [data-testid="block-container"] {{
            max-width: {max_width}px;
            margin: 0 auto;
            padding: 2rem 1.5rem 3rem 1.5rem;
        }}
        .kpi-grid {{
            display: grid;
            grid-template-columns: repeat(4, minmax(0, 1fr));
            gap: 14px;
            margin: 12px 0 20px;
        }}
        @media (max-width: 1100px) {{
            .kpi-grid {{ grid-template-columns: repeat(2, minmax(0, 1fr)); }}
        }}
        .kpi-card, .panel {{
            background: {t['panel']};
            border: 1px solid {t['border']};
            border-radius: 12px;
            padding: 14px 16px;
            box-shadow: {t['shadow']};
        }}
        .panel {{ margin-bottom: 14px; }}
        .kpi-label {{
            color: {t['muted']};
            font-size: 0.85rem;
            text-transform: uppercase;
            margin-bottom: 6px;
        }}
        .kpi-value {{ font-size: 1.7rem; font-weight: 700; line-height: 1.2; }}
        .kpi-note {{ font-size: 0.9rem; margin-top: 4px; }}
        .section-title {{
            display: flex;
            align-items: center;
            justify-content: space-between;
            margin: 12px 0 8px;
        }}
        .section-chip {{
            padding: 4px 10px;
            border-radius: 999px;
            border: 1px solid {t['border']};
            color: {t['muted']};
            font-size: 0.8rem;
        }}
        .variation-table {{ width: 100%; border-collapse: collapse; }}
        .variation-table th {{ color: {t['muted']}; text-align: left; }}
        .variation-table th, .variation-table td {{
            padding: 8px 6px;
            border-bottom: 1px solid rgba(148, 163, 184, 0.12);
        }}
        .rate-bar {{ display: flex; align-items: center; gap: 8px; min-width: 120px; }}
        .rate-track {{
            flex: 1;
            height: 8px;
            border-radius: 4px;
            background: rgba(255,255,255,0.08);
            overflow: hidden;
        }}
        .rate-fill {{ height: 100%; border-radius: 4px; }}
        .rate-label {{ font-size: 0.85rem; white-space: nowrap; }}
        </style>
        """,
        unsafe_allow_html=True,
    )


def _style_fig(fig):
    """Shared chart styling."""
    fig.update_layout(
        paper_bgcolor="rgba(0,0,0,0)",
        plot_bgcolor="rgba(0,0,0,0)",
        font=dict(color=THEME["text"], family="sans-serif"),
        legend_title_text="",
        margin=dict(t=40, b=10, l=10, r=10),
    )
    fig.update_yaxes(showgrid=True, gridcolor="rgba(148,163,184,0.15)", zeroline=False, color=THEME["muted"])
    fig.update_xaxes(showgrid=False, zeroline=False, color=THEME["muted"])
    return fig


def _style_scene(fig):
    fig.update_layout(
        paper_bgcolor="rgba(0,0,0,0)",
        font=dict(color=THEME["text"], family="sans-serif"),
        legend_title_text="",
        margin=dict(t=40, b=10, l=10, r=10),
        scene=dict(aspectmode="data", xaxis_title="x", yaxis_title="y", zaxis_title="z"),
    )
    return fig


def section_header(title: str, chip: str | None = None) -> None:
    chip_html = f"<span class='section-chip'>{chip}</span>" if chip else ""
    st.markdown(
        f"<div class='section-title'><h3>{title}</h3>{chip_html}</div>",
        unsafe_allow_html=True,
    )


@st.cache_data(show_spinner=False)
def load_report_cached(path: str):
    return data.load_eval_report(path)


def report_path_input() -> Path:
    """Sidebar field for the evaluation report CSV."""
    with st.sidebar:
        raw = st.text_input("Report CSV", value=str(DEFAULT_REPORT_CSV), key="report_path")
    return Path(raw)


def show_load_banner(report: data.LoadReport, rows: int) -> None:
    if rows:
        st.success(f"Loaded {rows} task(s) from {report.source}.")
    else:
        st.info("No evaluation results loaded yet.")


def render_refresh_button() -> None:
    with st.container():
        if st.button("Refresh data", help="Clears cached reads and reloads the report", type="primary"):
            st.cache_data.clear()
            st.rerun()


def render_report_filters(df: pd.DataFrame) -> Dict:
    """Sidebar filters shared by the report pages."""
    with st.sidebar:
        st.header("Filters")
        if df is None or df.empty:
            st.info("No data available yet.")
            return {}
        filters: Dict[str, List] = {}
        for col in ["variation", "status"]:
            options = sorted(df[col].dropna().unique())
            if options:
                filters[col] = st.multiselect(col.title(), options=options, key=f"filter_{col}")
        return filters


def render_kpi_row(kpis: Dict) -> None:
    error = kpis.get("mean_endpoint_error")
    fraction = kpis.get("mean_endpoint_error_fraction")
    items = [
        {"label": "Tasks", "value": kpis.get("tasks", 0), "note": f"{kpis.get('distilled', 0)} distilled"},
        {"label": "Detection rate", "value": f"{kpis.get('mean_detection_rate', 0.0) * 100:.1f}%"},
        {
            "label": "Mean endpoint error",
            "value": "-" if error is None else f"{error * 100:.1f} cm",
            "note": None if fraction is None else f"{fraction * 100:.1f}% of workspace",
        },
        {
            "label": "Plan feasibility",
            "value": f"{kpis.get('success_rate', 0.0) * 100:.1f}%",
            "note": None if kpis.get("worst_task") is None else f"worst task: {kpis['worst_task']}",
        },
    ]
    render_kpi_cards(items)


def render_kpi_cards(items: List[Dict]) -> None:
    cards = []
    for item in items:
        note = item.get("note")
        note_html = f"<div class='kpi-note' style='color:{THEME['muted']}'>{note}</div>" if note else ""
        cards.append(
            f"<div class='kpi-card'>"
            f"<div class='kpi-label'>{item.get('label', '')}</div>"
            f"<div class='kpi-value'>{item.get('value', '')}</div>"
            f"{note_html}"
            f"</div>"
        )
    st.markdown(f"<div class='kpi-grid'>{''.join(cards)}</div>", unsafe_allow_html=True)


def render_rate_bar(rate: float) -> str:
    """HTML bar for a rate in [0, 1]; NaN draws an empty bar."""
    value = 0.0 if rate is None or pd.isna(rate) else min(1.0, max(0.0, float(rate)))
    color = THEME["ok"] if value >= RATE_BAR_WARN else THEME["fail"]
    return (
        f"<div class='rate-bar'>"
        f"<div class='rate-track'><div class='rate-fill' style='width:{value * 100:.1f}%;background:{color}'></div></div>"
        f"<span class='rate-label'>{value * 100:.0f}%</span>"
        f"</div>"
    )


def render_variation_table(standings: pd.DataFrame) -> None:
    """One row per variation: tasks, feasible and detection rates, endpoint error, keypoints."""
    if standings is None or standings.empty:
        st.info("No standings to display yet.")
        return

    rows_html = []
    for _, row in standings.iterrows():
        success = render_rate_bar(row["success_rate"])
        detection = render_rate_bar(row["mean_detection_rate"])
        error = row["mean_endpoint_error"]
        error_text = "-" if pd.isna(error) else f"{error * 100:.1f} cm"
        rows_html.append(
            f"<tr>"
            f"<td><strong>{row['variation']}</strong></td>"
            f"<td>{int(row['tasks'])}</td>"
            f"<td>{success}</td>"
            f"<td>{detection}</td>"
            f"<td>{error_text}</td>"
            f"<td>{row['mean_keypoints']:.1f}</td>"
            f"</tr>"
        )

    table_html = (
        "<table class='variation-table'>"
        "<thead><tr><th>Variation</th><th>Tasks</th><th>Feasible</th><th>Detection</th><th>Endpoint error</th><th>|K|</th></tr></thead>"
        f"<tbody>{''.join(rows_html)}</tbody></table>"
    )
    st.markdown(f"<div class='panel'>{table_html}</div>", unsafe_allow_html=True)


def plot_endpoint_errors(df: pd.DataFrame) -> None:
    if df is None or df.empty:
        return
    fig = px.bar(
        df,
        x="task",
        y="endpoint_error",
        color="variation",
        title="Endpoint error per task (m)",
        labels={"task": "", "endpoint_error": ""},
    )
    fig = _style_fig(fig)
    st.plotly_chart(fig, width="stretch")


def plot_running_success(running: pd.DataFrame) -> None:
    if running is None or running.empty:
        st.info("Add results to see the running success rate.")
        return
    fig = px.line(
        running,
        x="task",
        y="success_rate",
        markers=True,
        title="Running plan feasibility",
        labels={"task": "", "success_rate": ""},
    )
    fig = _style_fig(fig)
    fig.update_yaxes(range=[0, 1.05])
    st.plotly_chart(fig, width="stretch")


def plot_keypoints_3d(reference: Dict[str, np.ndarray], matches: Dict[int, Dict[str, np.ndarray]]) -> None:
    """Reference keypoints (diamonds) plus each demonstration's matched positions."""
    fig = go.Figure()
    for i, (kid, position) in enumerate(sorted(reference.items())):
        color = KEYPOINT_COLORS[i % len(KEYPOINT_COLORS)]
        fig.add_trace(
            go.Scatter3d(
                x=[position[0]], y=[position[1]], z=[position[2]],
                mode="markers+text", text=[kid], name=kid,
                marker=dict(size=7, symbol="diamond", color=color),
            )
        )
        found = np.array([m[kid] for m in matches.values() if kid in m]).reshape(-1, 3)
        if len(found):
            fig.add_trace(
                go.Scatter3d(
                    x=found[:, 0], y=found[:, 1], z=found[:, 2],
                    mode="markers", name=f"{kid} in demos", showlegend=False,
                    marker=dict(size=3, color=color, opacity=0.6),
                )
            )
    fig = _style_scene(fig)
    fig.update_layout(title="Keypoints")
    st.plotly_chart(fig, width="stretch")


def _box_mesh(box: planner.Box, name: str) -> go.Mesh3d:
    lo, hi = box.low, box.high
    x = [lo[0], hi[0], hi[0], lo[0], lo[0], hi[0], hi[0], lo[0]]
    y = [lo[1], lo[1], hi[1], hi[1], lo[1], lo[1], hi[1], hi[1]]
    z = [lo[2], lo[2], lo[2], lo[2], hi[2], hi[2], hi[2], hi[2]]
    i = [0, 0, 4, 4, 0, 0, 1, 1, 2, 2, 3, 3]
    j = [1, 2, 5, 6, 1, 5, 2, 6, 3, 7, 0, 4]
    k = [2, 3, 6, 7, 5, 4, 6, 5, 7, 6, 4, 7]
    return go.Mesh3d(x=x, y=y, z=z, i=i, j=j, k=k, opacity=0.25, color=THEME["muted"], name=name, showlegend=False)


def plot_plan_3d(world: Optional[planner.SceneWorld], approach: np.ndarray, execution: np.ndarray, samples: Sequence[List[float]] = ()) -> None:
    """Obstacles, approach path, execution trajectory and the other samples' start points."""
    fig = go.Figure()
    if world is not None:
        for n, box in enumerate(world.boxes):
            fig.add_trace(_box_mesh(box, f"obstacle {n}"))
    if len(approach):
        fig.add_trace(
            go.Scatter3d(
                x=approach[:, 0], y=approach[:, 1], z=approach[:, 2], mode="lines+markers", name="approach",
                line=dict(color=THEME["path"], width=5), marker=dict(size=3),
            )
        )
    if len(execution):
        fig.add_trace(
            go.Scatter3d(
                x=execution[:, 0], y=execution[:, 1], z=execution[:, 2], mode="lines", name="execution",
                line=dict(color=THEME["execution"], width=6),
            )
        )
    goals = np.array(list(samples), dtype=float).reshape(-1, 3)
    if len(goals):
        fig.add_trace(
            go.Scatter3d(
                x=goals[:, 0], y=goals[:, 1], z=goals[:, 2], mode="markers", name="sample starts",
                marker=dict(size=4, color=THEME["muted"], symbol="x"),
            )
        )
    fig = _style_scene(fig)
    fig.update_layout(title="Plan")
    st.plotly_chart(fig, width="stretch")


def render_load_report(report: data.LoadReport) -> None:
    if report.issues:
        st.error("Issues: " + " | ".join(report.issues))
    if report.warnings:
        friendly = [f"{k.replace('_', ' ')}: {v}" for k, v in report.warnings.items()]
        st.warning("Data quality warnings: " + " | ".join(friendly))
