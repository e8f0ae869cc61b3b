import os
import tempfile
from pathlib import Path

import pandas as pd
import streamlit as st

import simulator
from config import PRESETS, load_config, preset_scan_params
from evaluation import evaluate_run
from graph_utils import get_graph_stats, read_graph_csv, visualize_pose_graph_pyvis
from pipeline import PipelineError, run
from scan_model import Pose2

# Page configuration
st.set_page_config(
    page_title="📡 Radar Odometry Workbench",
    page_icon="📡",
    layout="wide",
    initial_sidebar_state="expanded"
)

st.markdown("""
<style>
    .main-header {
        font-family: 'Inter', sans-serif;
        font-size: 3rem;
        font-weight: 800;
        background: linear-gradient(120deg, #FF4B4B 0%, #FF9068 100%);
        -webkit-background-clip: text;
        -webkit-text-fill-color: transparent;
        text-align: center;
        margin-bottom: 2rem;
    }
    .info-box {
        background: rgba(38, 39, 48, 0.5);
        padding: 1.5rem;
        border-radius: 12px;
        border-left: 4px solid #FF4B4B;
        margin: 1rem 0;
    }
</style>
""", unsafe_allow_html=True)

WORK_DIR = Path(os.getenv("MMSLAM_OUTPUT_DIR", "runs"))

FIXTURES = {
    "Square loop in a hall": (simulator.hall, lambda n: simulator.square_loop_script()),
    "Straight gallery": (simulator.gallery,
                         lambda n: simulator.straight_script(1.0, n * 0.25 + 1.0, Pose2(-60.0, 0.0, 0.0))),
    "Stationary room": (simulator.room, lambda n: simulator.stationary_script(n * 0.25 + 1.0)),
}

# Session state
if 'sequence_dir' not in st.session_state:
    st.session_state.sequence_dir = ""
if 'run_dir' not in st.session_state:
    st.session_state.run_dir = ""


def load_csv(path):
    path = Path(path)
    return pd.read_csv(path) if path.exists() else None


# Sidebar
with st.sidebar:
    st.title("📡 Workbench")
    st.markdown("---")
    st.session_state.sequence_dir = st.text_input("Scan directory", st.session_state.sequence_dir)
    st.session_state.run_dir = st.text_input("Run directory", st.session_state.run_dir)

    st.markdown("---")
    st.markdown("### 📊 Quick Stats")
    if st.session_state.run_dir and Path(st.session_state.run_dir, "graph_nodes.csv").exists():
        graph = read_graph_csv(Path(st.session_state.run_dir, "graph_nodes.csv"),
                               Path(st.session_state.run_dir, "graph_edges.csv"))
        stats = get_graph_stats(graph)
        st.metric("Poses", stats["nodes"])
        st.metric("Loop closures", stats["loop_edges"])
    else:
        st.info("📝 No run loaded yet. Simulate a sequence and run the pipeline to get started!")

st.markdown('<h1 class="main-header">📡 Radar Odometry Workbench</h1>', unsafe_allow_html=True)

tab1, tab2, tab3, tab4 = st.tabs([
    "🛰️ Simulate",
    "🚀 Run",
    "📏 Evaluate",
    "🕸️ Pose Graph"
])

# ========== TAB 1: SIMULATE ==========
with tab1:
    st.header("🛰️ Render a synthetic sequence")
    col1, col2 = st.columns([2, 1])
    with col1:
        fixture = st.selectbox("Fixture", list(FIXTURES))
        n_scans = st.number_input("Scans", min_value=2, max_value=2000, value=200)
        preset = st.selectbox("Sensor preset", sorted(PRESETS), index=sorted(PRESETS).index("desk"))
    with col2:
        speckle = st.number_input("Speckle probability", 0.0, 1.0, 0.002, format="%.4f")
        ghost = st.number_input("Ghost probability", 0.0, 1.0, 0.05)
        seed = st.number_input("Noise seed", min_value=0, value=0)

    if st.button("🛰️ Generate", use_container_width=True):
        world_fn, script_fn = FIXTURES[fixture]
        out = WORK_DIR / f"sim_{fixture.split()[0].lower()}_{n_scans}"
        status_text = st.empty()
        try:
            simulator.generate_sequence(
                world_fn(), script_fn(int(n_scans)), int(n_scans), preset_scan_params(preset), out,
                simulator.ArtifactConfig(speckle_prob=speckle, ghost_prob=ghost, noise_seed=int(seed)),
                progress_callback=lambda msg: status_text.text(msg),
            )
            st.session_state.sequence_dir = str(out)
            st.success(f"✅ Sequence written to {out}")
        except ValueError as e:
            st.error(f"❌ {e}")

    if st.session_state.sequence_dir:
        truth = load_csv(Path(st.session_state.sequence_dir, "groundtruth.csv"))
        if truth is not None:
            st.markdown("**Ground-truth path**")
            st.scatter_chart(truth, x="x", y="y")

# ========== TAB 2: RUN ==========
with tab2:
    st.header("🚀 Run the odometry pipeline")
    col1, col2 = st.columns([1, 1])
    with col1:
        matching = st.selectbox("Matching", ["scan_to_map", "scan_to_frames(9)", "scan_to_frames(1)"])
        loop_enabled = st.checkbox("Loop closure", value=True)
    with col2:
        geometry_enabled = st.checkbox("Geometry filter", value=True)
        probability_enabled = st.checkbox("Probability filter", value=True)

    if st.button("🚀 Run", use_container_width=True):
        if not st.session_state.sequence_dir:
            st.warning("⚠️ Choose a scan directory first")
        else:
            cfg = load_config(overrides={
                "pipeline.matching": matching,
                "pipeline.loop_enabled": str(loop_enabled).lower(),
                "pipeline.geometry_filter_enabled": str(geometry_enabled).lower(),
                "pipeline.probability_filter_enabled": str(probability_enabled).lower(),
            })
            out = WORK_DIR / f"run_{Path(st.session_state.sequence_dir).name}"
            status_text = st.empty()
            try:
                with st.spinner("Tracking..."):
                    summary = run(cfg, st.session_state.sequence_dir, out,
                                  progress_callback=lambda msg: status_text.text(msg))
                st.session_state.run_dir = str(out)
                st.success(f"✅ {summary.scans} scans, {summary.fallbacks} fallbacks, {summary.loops} loops")
            except PipelineError as e:
                st.error(f"❌ {e}")

    if st.session_state.run_dir:
        odometry = load_csv(Path(st.session_state.run_dir, "odometry.csv"))
        timing = load_csv(Path(st.session_state.run_dir, "timing.csv"))
        feature_map = load_csv(Path(st.session_state.run_dir, "map.csv"))
        if odometry is not None:
            col1, col2 = st.columns([1, 1])
            with col1:
                st.markdown("**Odometry**")
                st.scatter_chart(odometry, x="x", y="y")
            with col2:
                if feature_map is not None:
                    st.markdown(f"**Feature map** ({len(feature_map)} points)")
                    st.scatter_chart(feature_map, x="x", y="y")
        if timing is not None:
            st.markdown("**Map size per scan**")
            st.line_chart(timing, x="scan_index", y="map_size")
            st.dataframe(timing.tail(20), use_container_width=True)

# ========== TAB 3: EVALUATE ==========
with tab3:
    st.header("📏 Drift and absolute trajectory error")
    gt_default = str(Path(st.session_state.sequence_dir, "groundtruth.csv")) if st.session_state.sequence_dir else ""
    gt_path = st.text_input("Ground truth CSV", gt_default)
    if st.button("📏 Evaluate", use_container_width=True):
        run_dir = Path(st.session_state.run_dir)
        estimates = {"odometry": run_dir / "odometry.csv", "corrected": run_dir / "corrected.csv"}
        try:
            rows = evaluate_run(estimates, gt_path, run_dir)
            st.dataframe(pd.DataFrame(rows), use_container_width=True)
            st.text((run_dir / "report.txt").read_text())
        except (FileNotFoundError, ValueError) as e:
            st.error(f"❌ {e}")

# ========== TAB 4: POSE GRAPH ==========
with tab4:
    st.header("🕸️ Pose graph")
    nodes_csv = Path(st.session_state.run_dir or ".", "graph_nodes.csv")
    if not nodes_csv.exists():
        st.info("No pose graph available. Run the pipeline with loop closure enabled first.")
    else:
        every = st.slider("Show every n-th pose", 1, 20, 5)
        graph = read_graph_csv(nodes_csv, nodes_csv.with_name("graph_edges.csv"))
        with tempfile.NamedTemporaryFile(mode='w', delete=False, suffix='.html', dir='.') as tmp_file:
            tmp_viz_path = tmp_file.name
        try:
            visualize_pose_graph_pyvis(graph, output_path=tmp_viz_path, height="750px", every=every)
            with open(tmp_viz_path, 'r', encoding='utf-8') as f:
                st.components.v1.html(f.read(), height=800)
            events = load_csv(nodes_csv.with_name("loop_events.csv"))
            if events is not None and len(events):
                st.markdown("**Loop events**")
                st.dataframe(events, use_container_width=True)
        finally:
            if os.path.exists(tmp_viz_path):
                os.unlink(tmp_viz_path)
