#!/usr/bin/env python3
"""
Tests for the run dashboard's data loading and figures (no Streamlit session needed).
"""

import pandas as pd

from dashboard import create_loss_figure, create_reward_figure, find_runs, load_loss_curves, load_metric_report, load_rewards
from metrics import MetricReport
from online_planner import REWARD_COLUMNS
from training import LOSS_COLUMNS


def _losses(iters=5):
    return pd.DataFrame({
        'iter': range(iters), 'total': [1.0 / (i + 1) for i in range(iters)], 'simple': 0.5, 'foot': 0.1,
        'inter': 0.2, 'prefix': 0.05, 'p': [1.0, 1.0, 0.5, 0.0, 0.0][:iters],
    }, columns=LOSS_COLUMNS)


def _rewards():
    return pd.DataFrame([[40, 0, 0.1, 0.9, 0.2, 0.5, 0.88], [80, 1, 0.6, 0.3, 0.1, 1.0, 0.78]], columns=REWARD_COLUMNS)


def test_load_loss_curves(tmp_path):
    _losses().to_csv(tmp_path / 'losses.csv', index=False)
    df = load_loss_curves(str(tmp_path))
    assert list(df.columns) == LOSS_COLUMNS
    assert len(df) == 5
    assert load_loss_curves(str(tmp_path / 'empty')) is None


def test_loss_figure_has_every_term_and_schedule():
    fig = create_loss_figure(_losses())
    names = [trace.name for trace in fig.data]
    assert names == ['total', 'simple', 'foot', 'inter', 'prefix', 'p']
    assert fig.data[-1].yaxis == 'y2'
    assert fig.layout.yaxis.type == 'log'
    assert create_loss_figure(_losses(), log_scale=False).layout.yaxis.type == 'linear'


def test_metric_report_loading(tmp_path):
    report = MetricReport(fid=1.5, diversity=2.0, mmdist=3.0, penetration=4.0, floating=5.0, skating=6.0,
                          iv=0.25, fid_cd=0.5, div_cd=0.75)
    path = report.save(tmp_path / 'metrics.txt')
    values = load_metric_report(path)
    assert values['fid'] == 1.5 and values['iv'] == 0.25
    assert load_metric_report(tmp_path / 'missing.txt') is None


def test_reward_figure():
    fig = create_reward_figure(_rewards())
    assert {trace.name for trace in fig.data} == {'w', 'r_imitation', 'r_default', 'r_root', 'r_total'}


def test_runs_and_rewards_discovery(tmp_path):
    run = tmp_path / 'sample'
    run.mkdir()
    _rewards().to_csv(run / 'rewards_0000.csv', index=False)
    _rewards().to_csv(run / 'rewards_0001.csv', index=False)
    assert find_runs(str(tmp_path)) == [str(run)]
    rewards = load_rewards(str(run))
    assert len(rewards) == 4
    assert set(rewards['source']) == {'rewards_0000.csv', 'rewards_0001.csv'}
