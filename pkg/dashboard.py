#!/usr/bin/env python3
"""
Training Run Dashboard

Interactive Streamlit dashboard for a run directory: loss curves with the
scheduled-training probability, the latest metric report and actor-aware reward logs.
"""

import glob
import os
from datetime import datetime
from pathlib import Path

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st
from plotly.subplots import make_subplots

import config
from errors import ParseError
from metrics import MetricReport, parse_report
from online_planner import REWARD_COLUMNS
from training import LOSS_COLUMNS

LOSS_TERMS = ['total', 'simple', 'foot', 'inter', 'prefix']
REWARD_TERMS = ['r_imitation', 'r_default', 'r_root', 'r_total']


def apply_dashboard_styling():
    """Apply custom CSS for dark mode tables."""
    st.markdown("""
    <style>
        .stDataFrame > div {
            background-color: #1e1e1e !important;
            color: #ffffff !important;
        }
        .stDataFrame th {
            background-color: #2d2d2d !important;
            color: #ffffff !important;
            border: 1px solid #404040 !important;
        }
        [data-testid="metric-container"] {
            background-color: #262730;
            border: 1px solid #404040;
            padding: 0.5rem;
            border-radius: 0.5rem;
        }
    </style>
    """, unsafe_allow_html=True)


def find_runs(root=config.RUNS_DIR):
    """Run directories under root holding losses, metrics or rewards, newest first."""
    patterns = ['losses.csv', 'metrics.txt', 'rewards*.csv']
    runs = {os.path.dirname(path) for pattern in patterns
            for path in glob.glob(os.path.join(root, '**', pattern), recursive=True)}
    return sorted(runs, key=os.path.getmtime, reverse=True)


@st.cache_data(ttl=60, show_spinner="🔄 Loading loss curves...")
def load_loss_curves(run_dir):
    """Loss CSV written by training, or None when the run has none."""
    path = Path(run_dir) / 'losses.csv'
    if not path.exists():
        return None
    df = pd.read_csv(path)
    missing = set(LOSS_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"{path} is missing columns {sorted(missing)}")
    return df


def load_metric_report(path):
    """Metric values keyed by name; None when the report does not exist."""
    path = Path(path)
    if not path.exists():
        return None
    return parse_report(path.read_text(encoding='utf-8'))


@st.cache_data(ttl=60)
def load_rewards(run_dir):
    files = sorted(glob.glob(os.path.join(run_dir, 'rewards*.csv')))
    if not files:
        return None
    frames = [pd.read_csv(path).assign(source=os.path.basename(path)) for path in files]
    return pd.concat(frames, ignore_index=True)


def create_loss_figure(df, log_scale=True):
    """Loss terms on the left axis, scheduled-training probability p on the right."""
    fig = make_subplots(specs=[[{"secondary_y": True}]])
    for term in LOSS_TERMS:
        fig.add_trace(go.Scatter(x=df['iter'], y=df[term], mode='lines', name=term), secondary_y=False)
    fig.add_trace(go.Scatter(x=df['iter'], y=df['p'], mode='lines', name='p',
                             line={'dash': 'dot', 'color': '#888888'}), secondary_y=True)
    fig.update_layout(title="Training Losses", xaxis_title="Iteration", legend_title="Term")
    fig.update_yaxes(title_text="Loss", type='log' if log_scale else 'linear', secondary_y=False)
    fig.update_yaxes(title_text="Ground-truth history probability", range=[0, 1.05], secondary_y=True)
    return fig


def create_reward_figure(df):
    """Per-window reward terms and deviation weight w."""
    long = df.melt(id_vars=['window'], value_vars=['w'] + REWARD_TERMS, var_name='term', value_name='value')
    fig = px.line(long, x='window', y='value', color='term', markers=True, title="Actor-Aware Reward per Window",
                  labels={'window': 'Window', 'value': 'Value', 'term': 'Term'})
    fig.update_yaxes(range=[0, max(1.05, float(long['value'].max()) * 1.05)])
    return fig


def create_summary_metrics(losses, report):
    """Create summary metric cards."""
    col1, col2, col3, col4 = st.columns(4)

    with col1:
        st.metric(label="Iterations", value=f"{len(losses):,}" if losses is not None else "–")

    with col2:
        if losses is not None and len(losses):
            last = losses['total'].iloc[-1]
            first = losses['total'].iloc[0]
            st.metric(label="Final Total Loss", value=f"{last:.4f}", delta=f"{last - first:+.4f} since start",
                      delta_color='inverse')
        else:
            st.metric(label="Final Total Loss", value="–")

    with col3:
        st.metric(label="FID", value=f"{report['fid']:.3f}" if report and 'fid' in report else "–")

    with col4:
        st.metric(label="Interpenetration", value=f"{report['iv']:.4f} L" if report and 'iv' in report else "–")


def display_metric_report(report):
    rows = [{'Metric': name, 'Value': value, 'Unit': MetricReport.UNITS.get(name, '')}
            for name, value in report.items()]
    st.dataframe(pd.DataFrame(rows), use_container_width=True, hide_index=True)


def main():
    """Main dashboard function."""
    st.set_page_config(page_title="Reaction Planner Runs", page_icon="🤝", layout="wide")
    apply_dashboard_styling()
    st.title("🤝 Reaction Planner Dashboard")

    root = st.sidebar.text_input("Runs directory", value=config.RUNS_DIR)
    runs = find_runs(root)
    if not runs:
        st.error(f"No runs found under {root}. Train a model first.")
        st.code("python3 cli.py gen-data && python3 cli.py train")
        return

    run_dir = st.sidebar.selectbox("Run", runs)
    log_scale = st.sidebar.checkbox("Log-scale losses", value=True)
    st.info(f"📊 Run: **{run_dir}** | Last updated: "
            f"{datetime.fromtimestamp(os.path.getmtime(run_dir)).strftime('%Y-%m-%d %H:%M:%S')}")

    losses = load_loss_curves(run_dir)
    try:
        report = load_metric_report(Path(run_dir) / 'metrics.txt')
    except ParseError as e:
        st.warning(f"⚠️ Could not read metrics: {e}")
        report = None

    create_summary_metrics(losses, report)

    st.markdown("---")
    if losses is not None:
        st.plotly_chart(create_loss_figure(losses, log_scale), use_container_width=True)
    else:
        st.caption("No loss curves in this run.")

    if report:
        st.markdown("---")
        st.subheader("📏 Metric Report")
        display_metric_report(report)

    rewards = load_rewards(run_dir)
    if rewards is not None and len(rewards):
        st.markdown("---")
        st.subheader("🎯 Tracker Rewards")
        source = st.selectbox("Reward log", sorted(rewards['source'].unique()))
        selected = rewards[rewards['source'] == source]
        st.plotly_chart(create_reward_figure(selected), use_container_width=True)
        st.dataframe(selected[REWARD_COLUMNS], use_container_width=True, hide_index=True)


if __name__ == "__main__":
    main()
