#!/usr/bin/env python3
"""
Tests for the command line: option resolution, exit codes and a small end-to-end pipeline.
"""

import io
import json
import shutil

import pandas as pd
import pytest
import yaml

from cli import EFFECTIVE_CONFIG, build_parser, resolve_config, run
from data_io import MANIFEST_NAME, synth_generate, write_clip
from errors import ValidationError
from online_planner import StreamFrame, clip_source

SMALL_MODEL = ['--history', '4', '--window', '5', '--steps', '2', '--consecutive', '2']


@pytest.fixture(scope='module')
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp('pipeline')
    data, run_dir = root / 'data', root / 'train'
    assert run(['gen-data', '--scenario', 'mirror', '--clips', '2', '--frames', '60', '--seed', '1',
                '--out', str(data)]) == 0
    assert run(['train', '--data', str(data), '--out', str(run_dir), '--iters', '3', '--batch-size', '2',
                '--log-every', '0', *SMALL_MODEL]) == 0
    return root, data, run_dir / 'model.pt'


def _sample(checkpoint, data, out, seed='7'):
    return run(['sample', '--checkpoint', str(checkpoint), '--data', str(data), '--out', str(out),
                '--init', 'rest', '--warmup', '6', '--seed', seed, '--deterministic'])


# --- option resolution ------------------------------------------------------

def _help(capsys, command):
    assert run([command, '--help']) == 0
    return capsys.readouterr().out


def test_help_lists_defaults(capsys):
    assert run(['train', '--help']) == 0
    text = capsys.readouterr().out
    for expected in ['--history', '(default: 20)', '(default: 40)', '(default: 8)',
                     '(default: 0.2)', '(default: 0.5)', '(default: 0.1)', '(default: 0.15)', '[frames]']:
        assert expected in text
    assert run(['gen-data', '--help']) == 0
    assert 'frames at 30 fps' in capsys.readouterr().out
    assert '--guidance' not in _help(capsys, 'train')
    assert '(default: 5.0)' in _help(capsys, 'sample')


def test_usage_errors_exit_two(capsys):
    assert run(['fly']) == 2
    assert run([]) == 2
    assert run(['train', '--iters', 'many']) == 2
    assert run(['train', '--iters', '0']) == 2
    assert run(['train', '--guidance', '2']) == 2
    assert 'Validation failed' in capsys.readouterr().err


def test_flags_override_file_over_defaults(tmp_path):
    path = tmp_path / 'run.yaml'
    path.write_text(yaml.safe_dump({'iters': 50, 'seed': 4, 'train': {'batch_size': 3, 'lr': 0.001}}))
    args = build_parser().parse_args(['train', '--config', str(path), '--iters', '7'])
    run_config = resolve_config(args)
    assert run_config['iters'] == 7
    assert run_config['batch_size'] == 3
    assert run_config['lr'] == 0.001
    assert run_config.seed == 4
    assert run_config['history'] == 20


def test_unknown_option_in_config_file(tmp_path):
    path = tmp_path / 'run.yaml'
    path.write_text(yaml.safe_dump({'train': {'epochs': 3}}))
    with pytest.raises(ValidationError):
        resolve_config(build_parser().parse_args(['train', '--config', str(path)]))
    assert run(['train', '--config', str(path)]) == 2


def test_planner_options_validated_before_work(tmp_path):
    assert run(['sample', '--data', str(tmp_path), '--warmup', '0']) == 2
    assert run(['sample']) == 2
    assert run(['stream', '--tcp', 'localhost']) == 2
    assert run(['bench', '--steps', '2,x']) == 2


def test_missing_checkpoint_is_a_runtime_failure(tmp_path, capsys):
    clip = tmp_path / 'actor.mclip'
    write_clip(clip, synth_generate('mirror', 20, 0, history=4, window=5).actor)
    assert run(['sample', '--actor', str(clip), '--checkpoint', str(tmp_path / 'none.pt'),
                '--out', str(tmp_path / 'out')]) == 1
    assert 'sample failed' in capsys.readouterr().err


# --- pipeline ---------------------------------------------------------------

def test_generated_dataset_and_training_outputs(pipeline):
    _, data, checkpoint = pipeline
    assert (data / MANIFEST_NAME).exists()
    assert (data / EFFECTIVE_CONFIG).exists()
    assert checkpoint.exists()
    curves = pd.read_csv(checkpoint.parent / 'losses.csv')
    assert len(curves) == 3
    echoed = yaml.safe_load((checkpoint.parent / EFFECTIVE_CONFIG).read_text())
    assert echoed['command'] == 'train' and echoed['window'] == 5


def test_sample_is_byte_identical_per_seed(pipeline):
    root, data, checkpoint = pipeline
    assert _sample(checkpoint, data, root / 'sample_a') == 0
    assert _sample(checkpoint, data, root / 'sample_b') == 0
    first = (root / 'sample_a' / 'record_0000.reactor.mclip').read_bytes()
    assert first == (root / 'sample_b' / 'record_0000.reactor.mclip').read_bytes()
    assert _sample(checkpoint, data, root / 'sample_c', seed='8') == 0
    assert first != (root / 'sample_c' / 'record_0000.reactor.mclip').read_bytes()


def test_sample_single_actor_clip(pipeline, tmp_path):
    _, data, checkpoint = pipeline
    assert run(['sample', '--checkpoint', str(checkpoint), '--actor', str(data / 'record_0000.actor.mclip'),
                '--init', 'rest', '--warmup', '6', '--track', '--out', str(tmp_path)]) == 0
    assert (tmp_path / 'reactor.mclip').exists()
    assert len(pd.read_csv(tmp_path / 'rewards.csv')) > 0


def test_evaluate_writes_report(pipeline):
    root, data, checkpoint = pipeline
    generated = root / 'generated'
    assert _sample(checkpoint, data, generated) == 0
    out = root / 'evaluation'
    assert run(['evaluate', '--generated', str(generated), '--reference', str(data), '--window', '5',
                '--subset', '2', '--out', str(out)]) == 0
    report = (out / 'metrics.txt').read_text()
    assert 'fid:' in report and 'iv:' in report
    assert len(pd.read_csv(out / 'per_window.csv')) == 24
    assert run(['inspect', str(out / 'metrics.txt')]) == 0


def test_evaluate_rejects_mismatched_skeleton(pipeline, tmp_path, capsys):
    _, data, _ = pipeline
    other = tmp_path / 'other'
    shutil.copytree(data, other)
    clip = other / 'record_0001.reactor.mclip'
    lines = clip.read_text().split('\n')
    header = json.loads(lines[0])
    header['joint_names'] = ['joint_%d' % i for i in range(22)]
    lines[0] = json.dumps(header)
    clip.write_text('\n'.join(lines))
    assert run(['evaluate', '--generated', str(other), '--reference', str(data), '--out', str(tmp_path / 'e')]) == 2
    assert 'skeleton mismatch' in capsys.readouterr().err


def test_inspect_summaries(pipeline, capsys):
    _, data, checkpoint = pipeline
    assert run(['inspect', str(data)]) == 0
    assert 'Records: 2' in capsys.readouterr().out
    assert run(['inspect', str(checkpoint)]) == 0
    assert 'Iteration 3' in capsys.readouterr().out
    assert run(['inspect', str(data / 'record_0000.actor.mclip')]) == 0
    assert '60 frames' in capsys.readouterr().out
    assert run(['inspect', str(data / 'missing')]) == 2


def test_stream_over_stdin(pipeline, monkeypatch, capsys):
    _, _, checkpoint = pipeline
    actor = synth_generate('mirror', 16, 3, history=4, window=5).actor
    lines = ''.join(frame.to_line() + '\n' for frame in clip_source(actor))
    monkeypatch.setattr('sys.stdin', io.StringIO(lines))
    assert run(['stream', '--checkpoint', str(checkpoint), '--batch', '--init', 'rest', '--warmup', '6',
                '--text', 'mirror the actor', '--deterministic']) == 0
    captured = capsys.readouterr()
    emitted = [StreamFrame.from_line(line) for line in captured.out.splitlines()]
    assert [frame.t for frame in emitted] == list(range(6, 16))
    assert 'STREAM SUMMARY' in captured.err


def test_bench_writes_table(tmp_path, capsys):
    out = tmp_path / 'latency.csv'
    assert run(['bench', '--steps', '1,2', '--repeats', '1', '--out', str(out)]) == 0
    table = pd.read_csv(out)
    assert list(table['T']) == [1, 2]
    assert 'SAMPLING LATENCY' in capsys.readouterr().out
