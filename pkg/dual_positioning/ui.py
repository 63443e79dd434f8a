from __future__ import annotations

import math

import streamlit as st

from dual_positioning.cli import build_service
from dual_positioning.models import BenchReport, CrlbReport, NoiseModel, Position, SweepResult
from dual_positioning.simulation import PRESETS


st.set_page_config(page_title="Dual-System Positioning", layout="wide")


@st.cache_resource
def _get_service():
    """Create and cache a shared service instance for the Streamlit session."""
    return build_service()


def _render_sweep(result: SweepResult) -> None:
    """Render one row per sigma step and method, plus headline KPIs for the first step."""
    st.subheader(f"Sweep on preset {result.preset} (seed {result.master_seed})")
    rows = [
        {
            "sigma_m": step.sigma_m,
            "method": m.method,
            "rmse_m": m.rmse_m,
            "crlb_lb_m": step.error_lb_m,
            "rmse / bound": m.rmse_m / step.error_lb_m if step.error_lb_m > 0 else math.nan,
            "fail_count": m.failures,
            "median_us": m.median_us,
        }
        for step in result.steps
        for m in step.methods
    ]
    if result.steps:
        first = result.steps[0]
        cols = st.columns(len(first.methods) + 1)
        cols[0].metric("Error bound (m)", f"{first.error_lb_m:.4g}")
        for col, m in zip(cols[1:], first.methods):
            col.metric(f"{m.method} RMSE (m)", f"{m.rmse_m:.4g}", help=f"{m.failures} failed of {m.attempted}")
    st.dataframe(rows, use_container_width=True, hide_index=True)


def _render_crlb(report: CrlbReport, point: Position) -> None:
    st.subheader(f"Bound at {', '.join(f'{c:.1f}' for c in point.coords)}")
    st.metric("sqrt(trace CRLB) (m)", f"{report.error_lb:.6g}")
    st.markdown("**CRLB matrix (m²)**")
    st.dataframe(report.crlb_tdoa.tolist(), use_container_width=True)
    st.markdown("**Fisher information**")
    st.dataframe(report.fim_tdoa.tolist(), use_container_width=True)


def _render_bench(report: BenchReport) -> None:
    st.metric("CDL / iterative median time", f"{report.ratio:.3f}")
    st.dataframe(
        [
            {"method": s.method, "calls": s.calls, "median_us": s.median_us, "iqr_us": s.iqr_us, "failures": s.failures}
            for s in report.stats
        ],
        use_container_width=True,
        hide_index=True,
    )


def main() -> None:
    """Streamlit page entrypoint with simulation, bound and runtime tabs."""
    st.title("Dual-System Positioning")
    st.caption("Closed-form localisation from two unsynchronised systems, with an iterative baseline for comparison")

    try:
        service = _get_service()
    except Exception as exc:
        st.error(f"Failed to initialise service: {exc}")
        st.info("Check the values in .env, then restart the app.")
        return

    preset_name = st.sidebar.selectbox("Preset", list(PRESETS))
    seed = st.sidebar.number_input("Seed", value=service.settings.default_seed, step=1)
    preset = service.load_preset(preset_name)
    st.sidebar.caption(preset.note)

    tab1, tab2, tab3 = st.tabs(["Simulation", "Error bound", "Runtime"])

    with tab1:
        sigma = st.number_input("Sigma (m)", min_value=0.0, value=1.0, step=0.1)
        runs = st.number_input("Runs", min_value=1, value=200, step=50)
        full = st.checkbox("Full noise grid", value=False)
        use_cache = st.checkbox("Use cache", value=True, key="sweep_cache")

        if st.button("Run"):
            with st.spinner("Simulating..."):
                if full:
                    result = service.sweep(preset, seed=int(seed), runs=int(runs), use_cache=use_cache)
                else:
                    result = service.simulate(preset, float(sigma), seed=int(seed), runs=int(runs))
            _render_sweep(result)

    with tab2:
        centre = preset.ud_region.center
        coords = [
            st.number_input(axis, value=float(c), key=f"at_{axis}")
            for axis, c in zip(("x (m)", "y (m)", "z (m)"), centre)
        ]
        sigma_b = st.number_input("Sigma (m)", min_value=0.01, value=1.0, step=0.1, key="crlb_sigma")

        if st.button("Evaluate bound"):
            point = Position.of(coords)
            noise = NoiseModel.uniform(preset.scenario.m, preset.scenario.n, float(sigma_b))
            try:
                report = service.crlb(preset.scenario, point, noise)
            except ValueError as exc:
                st.error(str(exc))
            else:
                _render_crlb(report, point)

    with tab3:
        calls = st.number_input("Calls per method", min_value=10, value=service.settings.bench_calls, step=100)
        if st.button("Benchmark"):
            with st.spinner("Timing..."):
                report = service.bench(preset, calls=int(calls), seed=int(seed))
            _render_bench(report)


if __name__ == "__main__":
    main()
