import pandas as pd
import streamlit as st

from src import keypoints, ui
from src.errors import FormatError

ui.apply_centered_layout()

st.title("Skill Inspector")

path = st.text_input("Distilled skill (.kskill)", value="skill.kskill")
try:
    skill = keypoints.load_skill(path)
except (FileNotFoundError, FormatError) as exc:
    st.info(f"Could not load a skill: {exc}")
    st.stop()

provenance = skill.provenance
ui.render_kpi_cards(
    [
        {"label": "Keypoints", "value": len(skill.keypoints)},
        {"label": "Rounds", "value": provenance.get("rounds", "-")},
        {"label": "Passing fraction", "value": f"{provenance.get('passing_fraction', 0.0) * 100:.0f}%"},
        {"label": "Part", "value": provenance.get("part", "-"), "note": provenance.get("object")},
    ]
)

ui.plot_keypoints_3d({k.id: k.ref_position for k in skill.keypoints}, skill.matches)

ui.section_header("Matches per demonstration", chip=f"{len(skill.matches)} demos")
coverage = pd.DataFrame(
    [{"demo": i, **{kid: kid in found for kid in skill.keypoint_ids}} for i, found in sorted(skill.matches.items())]
)
st.dataframe(coverage, width="stretch")

with st.expander("Provenance"):
    st.json(provenance)
