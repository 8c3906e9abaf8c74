import streamlit as st

from src import data, metrics, ui

ui.apply_centered_layout()

st.title("Overview")

path = ui.report_path_input()
df, report = ui.load_report_cached(str(path))
ui.show_load_banner(report, len(df))
ui.render_refresh_button()

filters = ui.render_report_filters(df)
filtered_df = data.apply_report_filters(df, filters)

if filtered_df is None or filtered_df.empty:
    ui.render_load_report(report)
    st.warning("No results after applying filters.")
    st.stop()

kpis = metrics.summary_kpis(filtered_df)
ui.render_kpi_row(kpis)

st.subheader("By variation")
ui.render_variation_table(metrics.calculate_variation_standings(filtered_df))

st.subheader("Tasks")
ui.plot_endpoint_errors(filtered_df)
ui.plot_running_success(metrics.running_success(filtered_df))
st.dataframe(filtered_df, width="stretch")
