"""
Caption-Flow Lab dashboard
Main Streamlit application
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List

import pandas as pd
import streamlit as st

import config
from backend.bench import ArtifactLayout, EvalReport, read_table_csv
from backend.captionaug import FidelityScorer, load_rulesets, missing_mentions, request_for
from backend.checkpoints import read_jsonl
from backend.errors import LabError
from backend.grpo import TRAIN_LOG_NAME
from backend.results_store import ResultsStore
from backend.rewriters import build_rewriter, describe_rewriter
from backend.synthworld import GrammarConfig, Vocabulary, base_caption, read_dataset, sample_scene
from backend.tensorkit import RngStream

# Configure logging
Path(config.LOG_DIR).mkdir(parents=True, exist_ok=True)
logging.basicConfig(
    level=logging.INFO,
    format=config.LOG_FORMAT,
    handlers=[logging.FileHandler(os.path.join(config.LOG_DIR, "app.log")), logging.StreamHandler()],
)
logger = logging.getLogger(__name__)

# Page configuration
st.set_page_config(
    page_title=config.APP_TITLE,
    page_icon="🎧",
    layout="wide",
    initial_sidebar_state="expanded",
)

# Custom CSS
st.markdown(
    """
<style>
    .main-header {
        font-size: 2.2rem;
        font-weight: bold;
        color: #1f77b4;
        text-align: center;
        margin-bottom: 2rem;
    }
    .caption-card {
        border: 1px solid #ddd;
        border-radius: 8px;
        padding: 1rem;
        margin: 0.5rem 0;
        background-color: #fafafa;
    }
    .event-tag {
        background-color: #1f77b4;
        color: white;
        padding: 0.2rem 0.5rem;
        border-radius: 15px;
        font-size: 0.8rem;
        margin: 0.2rem;
        display: inline-block;
    }
</style>
""",
    unsafe_allow_html=True,
)


@st.cache_resource
def initialize_store():
    try:
        return ResultsStore(config.RESULTS_DB)
    except Exception as e:
        st.error(f"Error opening results store: {e}")
        return None


@st.cache_data(show_spinner=False)
def cached_dataset(path: str) -> List[Dict[str, Any]]:
    """Records as plain dicts, small enough for the browser"""
    rows = []
    for r in read_dataset(path):
        rows.append(
            {
                "record_id": r.record_id,
                "events": [e.to_dict() for e in r.scene.events],
                "original": r.original.text,
                "enriched": r.enriched.text if r.enriched is not None else "",
            }
        )
    return rows


def list_runs(root: str) -> List[str]:
    base = Path(root)
    if not base.exists():
        return []
    return sorted(str(p.parent) for p in base.rglob("config.json"))


def load_log(path: Path) -> pd.DataFrame:
    try:
        return pd.DataFrame(read_jsonl(path))
    except LabError:
        return pd.DataFrame()


def render_events(events: List[Dict[str, Any]]) -> str:
    tags = []
    for e in events:
        label = f"{e['event_class']} @ {e['onset']:.2f}s"
        tags.append(f'<span class="event-tag">{label}</span>')
    return " ".join(tags)


# Main header
st.markdown(f'<h1 class="main-header">{config.APP_TITLE}</h1>', unsafe_allow_html=True)

# Sidebar
with st.sidebar:
    st.header("🎧 Lab")
    st.markdown("---")
    runs = list_runs(config.ARTIFACT_DIR)
    run_dir = st.selectbox("Artifact directory", runs) if runs else None
    if not runs:
        st.info(f"No runs under {config.ARTIFACT_DIR}. Start one with `python run.py pipeline`.")

    st.markdown("---")
    st.subheader("Configuration")
    st.write(f"**Rewriter:** {config.REWRITER_KIND}")
    if config.REWRITER_KIND == "chat":
        st.write(f"**AI Provider:** {config.AI_PROVIDER.title()}")
        if config.AI_PROVIDER == "openai" and not config.OPENAI_API_KEY:
            st.warning("OpenAI API key not found. Set OPENAI_API_KEY in your .env file.")
        elif config.AI_PROVIDER == "openrouter" and not config.OPENROUTER_API_KEY:
            st.warning("OpenRouter API key not found. Set OPENROUTER_API_KEY in your .env file.")
        elif config.AI_PROVIDER == "ollama":
            st.caption(f"Using Ollama at {config.OLLAMA_HOST} with model {config.OLLAMA_MODEL}")
    elif config.REWRITER_KIND == "http":
        st.caption(f"Endpoint: {config.REWRITER_ENDPOINT or '(not set)'}")
    elif config.REWRITER_KIND == "subprocess":
        st.caption(f"Command: {config.REWRITER_COMMAND}")
    st.caption(f"Version {config.APP_VERSION}")

store = initialize_store()
results_tab, training_tab, reports_tab, dataset_tab, rewriter_tab = st.tabs(
    ["📊 Results", "📈 Training", "📋 Eval reports", "🗂️ Dataset", "✍️ Rewriter"]
)

with results_tab:
    if run_dir is None:
        st.write("Select a run to see its tables.")
    else:
        layout = ArtifactLayout(run_dir)
        for title, stem in (("Reward variants", layout.summary_stem), ("Caption augmentation", layout.augmentation_stem)):
            st.subheader(title)
            csv_path = stem.with_suffix(".csv")
            if csv_path.exists():
                st.dataframe(read_table_csv(csv_path), use_container_width=True)
                st.code(stem.with_suffix(".txt").read_text(encoding="utf-8"), language=None)
                with open(csv_path, "rb") as f:
                    st.download_button(f"⬇️ {csv_path.name}", f, file_name=csv_path.name, key=f"dl-{stem.name}")
            else:
                st.caption("Not written yet (run the report stage).")

with training_tab:
    if run_dir is None:
        st.write("Select a run to see its training curves.")
    else:
        layout = ArtifactLayout(run_dir)
        grpo_root = layout.root / "grpo"
        variants = sorted(p.name for p in grpo_root.iterdir() if p.is_dir()) if grpo_root.exists() else []
        if variants:
            st.subheader("GRPO")
            metric = st.selectbox("Metric", ["mean_reward", "r_clap", "r_kl", "r_fad", "kl_ref", "loss", "grad_norm", "probe_clap"])
            curves = {}
            for variant in variants:
                df = load_log(layout.grpo_dir(variant) / TRAIN_LOG_NAME)
                if not df.empty and metric in df:
                    curves[variant] = df.set_index("iteration")[metric]
            if curves:
                st.line_chart(pd.DataFrame(curves))
        pretrain_logs = sorted((layout.root / "pretrain").glob("*_log.jsonl")) if (layout.root / "pretrain").exists() else []
        if pretrain_logs:
            st.subheader("Pretraining held-out loss")
            curves = {}
            for path in pretrain_logs:
                df = load_log(path)
                if not df.empty and "held_out_loss" in df:
                    curves[path.stem.replace("_log", "")] = df.set_index("epoch")["held_out_loss"]
            st.line_chart(pd.DataFrame(curves))
        selection = layout.rho_selection
        if selection.exists():
            st.json(json.loads(selection.read_text(encoding="utf-8")))

with reports_tab:
    if store is not None:
        df = store.reports_dataframe(run_dir)
        if df.empty:
            st.write("No eval reports recorded yet.")
        else:
            st.dataframe(df, use_container_width=True)
        runs_df = store.runs_dataframe(run_dir)
        if not runs_df.empty:
            st.subheader("Stage runs")
            st.dataframe(runs_df, use_container_width=True)
    if run_dir is not None:
        eval_dir = Path(run_dir) / "eval"
        for path in sorted(eval_dir.glob("*.json")) if eval_dir.exists() else []:
            with st.expander(path.stem):
                st.json(EvalReport.load(path).to_dict())

with dataset_tab:
    if run_dir is None:
        st.write("Select a run to browse its captions.")
    else:
        layout = ArtifactLayout(run_dir)
        split = st.radio("Split", ["train", "val", "eval"], horizontal=True)
        path = layout.augmented(split) if layout.augmented(split).exists() else layout.dataset(split)
        if path.exists():
            rows = cached_dataset(str(path))
            index = st.number_input("Record", min_value=0, max_value=len(rows) - 1, value=0, step=1)
            row = rows[int(index)]
            st.markdown(f"**{row['record_id']}** {render_events(row['events'])}", unsafe_allow_html=True)
            col1, col2 = st.columns(2)
            with col1:
                st.markdown(f'<div class="caption-card"><b>Original</b><br>{row["original"]}</div>', unsafe_allow_html=True)
            with col2:
                enriched = row["enriched"] or "(not augmented)"
                st.markdown(f'<div class="caption-card"><b>Enriched</b><br>{enriched}</div>', unsafe_allow_html=True)
        else:
            st.caption("Dataset not generated yet.")

with rewriter_tab:
    st.subheader("Rewriter playground")
    rulesets = {rs.ruleset_id: rs for rs in load_rulesets()}
    ruleset_id = st.selectbox("Rule set", sorted(rulesets))
    seed = st.number_input("Scene seed", min_value=0, value=config.DEFAULT_SEED, step=1)
    if st.button("🎲 Sample and rewrite"):
        vocab = Vocabulary.load()
        scene = sample_scene(RngStream(int(seed), "playground"), GrammarConfig(), scene_id=f"playground-{seed}")
        base = base_caption(scene, vocab)
        ruleset = rulesets[ruleset_id]
        client = build_rewriter(config.REWRITER_KIND, config)
        try:
            with st.spinner("Rewriting..."):
                response = client.rewrite(request_for(scene, base, ruleset), ruleset)
            st.markdown(render_events([e.to_dict() for e in scene.events]), unsafe_allow_html=True)
            st.markdown(f"**Base:** {base.text}")
            st.markdown(f"**Enriched:** {response.text or '(empty)'}")
            st.write(f"Fidelity: {FidelityScorer(vocab)(scene, response.text):.2f}")
            missing = missing_mentions(scene, response.text, ruleset, vocab)
            if missing:
                st.warning(f"Missing required facts: {', '.join(missing)}")
            st.caption(json.dumps(describe_rewriter(client)))
        except LabError as e:
            st.error(f"Rewriter failed: {e}")
        finally:
            client.close()
