import streamlit as st

from src import ui

st.set_page_config(
    page_title="Keypoint Skills",
    page_icon="📍",
    layout="wide",
)

# Overview is the landing page
try:
    st.switch_page("pages/1_Overview.py")
except Exception:
    pass

ui.apply_centered_layout()

st.title("Keypoint Skills")
st.caption("Evaluation results, distilled skills and plans.")

path = ui.report_path_input()
df, report = ui.load_report_cached(str(path))
ui.show_load_banner(report, len(df))
ui.render_refresh_button()

st.write(
    "Use the sidebar to switch between Overview, Skill Inspector and Plan Viewer. "
    "Reports come from `python -m src eval-synthetic --report reports/report.txt`."
)

if report.issues:
    with st.expander("Data load notes"):
        for issue in report.issues:
            st.warning(issue)
