#!/usr/bin/env python3
"""
Tests for the synthetic generator, .mclip files, dataset manifests and training crops.
"""

import json
import logging

import numpy as np
import pytest
from scipy.stats import chisquare

from data_io import (
    HANDSHAKE_MIN_CLASP, InteractionRecord, adapt_external_pair, compute_feature_stats, crop_windows,
    load_dataset, load_manifest, load_record, read_clip, read_clip_header, save_dataset, save_record,
    synth_dataset, synth_generate, write_clip,
)
from errors import InvalidInputError, ParseError, UnsupportedVersionError
from motion_core import MIRROR_INDEX, SMPL22, canonical_history, compute_interaction_field

H, K = 4, 5


def _small(scenario='mirror', frames=40, seed=0):
    return synth_generate(scenario, frames, seed, history=H, window=K)


# --- synthetic generator ----------------------------------------------------

def test_mirror_rule_is_exact():
    record = synth_generate('mirror', 90, seed=3)
    actor, reactor = record.actor, record.reactor
    for i in range(len(record)):
        source = max(i - 3, 0)
        expected = actor.positions[source][list(MIRROR_INDEX)] * np.array([-1.0, 1.0, 1.0])
        assert np.array_equal(reactor.positions[i], expected)
        assert reactor.root_yaw[i] == pytest.approx(-actor.root_yaw[source], abs=1e-12)


def test_mirrored_reactor_stays_on_its_side():
    record = synth_generate('mirror', 300, seed=5)
    assert (record.actor.positions[:, 0, 0] > 0.6).all()
    assert (record.reactor.positions[:, 0, 0] < -0.6).all()


def test_follow_rule_keeps_one_meter_behind():
    record = synth_generate('follow', 60, seed=2)
    offset = record.actor.positions[:, 0] - record.reactor.positions[:, 0]
    heading = np.stack([np.sin(record.actor.root_yaw), np.cos(record.actor.root_yaw)], axis=1)
    assert np.allclose(np.linalg.norm(offset[:, [0, 2]], axis=1), 1.0, atol=1e-12)
    assert np.allclose(np.sum(offset[:, [0, 2]] * heading, axis=1), 1.0, atol=1e-12)
    assert np.array_equal(record.actor.root_yaw, record.reactor.root_yaw)


def test_handshake_wrists_meet_during_clasp():
    n = 120
    record = synth_generate('handshake', n, seed=4)
    approach = int(0.4 * n)
    wrist = 5  # right wrist row/column of the field
    clasped = []
    for i in range(n):
        field = compute_interaction_field(record.reactor.pose(i), record.actor.pose(i))
        clasped.append(field.values[wrist, wrist] == 1.0)
    assert all(clasped[approach:])
    assert sum(clasped) >= HANDSHAKE_MIN_CLASP
    assert not clasped[0]


def test_same_seed_same_record():
    a, b = synth_generate('follow', 70, seed=9), synth_generate('follow', 70, seed=9)
    assert np.array_equal(a.actor.positions, b.actor.positions)
    assert np.array_equal(a.reactor.root_yaw, b.reactor.root_yaw)
    assert not np.array_equal(a.actor.positions, synth_generate('follow', 70, seed=10).actor.positions)


def test_invalid_duration_or_scenario():
    with pytest.raises(InvalidInputError):
        synth_generate('mirror', 59, seed=0)
    with pytest.raises(InvalidInputError):
        synth_generate('dance', 100, seed=0)


def test_dataset_cycles_scenarios():
    records = synth_dataset('all', 4, 60, seed=1)
    assert [r.scenario for r in records] == ['mirror', 'follow', 'handshake', 'mirror']
    assert [r.seed for r in records] == [1, 2, 3, 4]


def test_record_rejects_length_mismatch():
    record = _small()
    with pytest.raises(InvalidInputError):
        InteractionRecord(record.actor, record.reactor.slice(0, 10), record.label, record.scenario)


# --- external adapter -------------------------------------------------------

def test_external_pair_resamples_and_assigns_roles():
    n = 61
    yaw = np.linspace(0.0, 1.0, n)
    a = np.stack([SMPL22.rest_pose((0.1 * i, 0.0), y) for i, y in enumerate(yaw)])
    b = np.stack([SMPL22.rest_pose((0.0, 2.0), np.pi) for _ in range(n)])
    record = adapt_external_pair(a, b, 'wave back', actor_index=1, source_fps=60)
    assert len(record) == 31
    assert record.scenario == 'external'
    assert np.allclose(record.actor.positions[:, 0], b[0, 0])
    assert np.allclose(record.reactor.root_yaw, yaw[::2], atol=1e-9)
    assert np.allclose(record.reactor.positions[:, 0, 0], 0.2 * np.arange(31))


def test_external_pair_rejects_wrong_shape():
    with pytest.raises(InvalidInputError):
        adapt_external_pair(np.zeros((5, 24, 3)), np.zeros((5, 24, 3)), 'x')


# --- .mclip files -----------------------------------------------------------

def test_record_round_trip_is_bit_identical(tmp_path):
    record = _small(seed=11)
    entry = save_record(record, tmp_path, 'pair')
    loaded = load_record(tmp_path, entry)
    assert np.array_equal(loaded.actor.positions, record.actor.positions)
    assert np.array_equal(loaded.reactor.positions, record.reactor.positions)
    assert np.array_equal(loaded.reactor.root_yaw, record.reactor.root_yaw)
    assert loaded.reactor.agent_id == record.reactor.agent_id
    assert (loaded.label, loaded.scenario, loaded.seed) == (record.label, record.scenario, 11)


def test_truncated_clip_names_the_line(tmp_path):
    path = write_clip(tmp_path / 'a.mclip', _small().actor)
    lines = path.read_text().splitlines()
    path.write_text('\n'.join(lines[:-1]) + '\n')
    with pytest.raises(ParseError) as excinfo:
        read_clip(path)
    assert excinfo.value.line == len(lines)


def test_short_row_names_the_line(tmp_path):
    path = write_clip(tmp_path / 'a.mclip', _small().actor)
    lines = path.read_text().splitlines()
    lines[5] = ' '.join(lines[5].split()[:-2])
    path.write_text('\n'.join(lines) + '\n')
    with pytest.raises(ParseError) as excinfo:
        read_clip(path)
    assert excinfo.value.line == 6


def test_clip_version_mismatch(tmp_path):
    path = write_clip(tmp_path / 'a.mclip', _small().actor)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header['version'] = 2
    path.write_text('\n'.join([json.dumps(header)] + lines[1:]) + '\n')
    with pytest.raises(UnsupportedVersionError):
        read_clip(path)


def test_clip_header_lists_joint_names(tmp_path):
    path = write_clip(tmp_path / 'a.mclip', _small().actor)
    header = read_clip_header(path)
    assert header['joint_names'] == list(SMPL22.joint_names)
    assert header['frames'] == 40


# --- datasets ---------------------------------------------------------------

def test_manifest_stats_match_recomputed_stats(tmp_path):
    records = [_small(scenario, seed=i) for i, scenario in enumerate(['mirror', 'follow'])]
    save_dataset(records, tmp_path)
    loaded, manifest = load_dataset(tmp_path)
    recomputed = compute_feature_stats(loaded)
    assert np.allclose(manifest.stats.mean, recomputed.mean, rtol=0, atol=1e-9)
    assert np.allclose(manifest.stats.std, recomputed.std, rtol=0, atol=1e-9)
    assert 'mirror' in manifest.vocabulary
    assert [entry['name'] for entry in manifest.records] == ['record_0000', 'record_0001']


def test_manifest_version_mismatch(tmp_path):
    save_dataset([_small()], tmp_path)
    payload = json.loads((tmp_path / 'manifest.json').read_text())
    payload['version'] = 7
    (tmp_path / 'manifest.json').write_text(json.dumps(payload))
    with pytest.raises(UnsupportedVersionError):
        load_manifest(tmp_path)


# --- training crops ---------------------------------------------------------

def test_exact_length_record_has_one_offset():
    record = _small(frames=H + 3 * K)
    offsets = {crop.offset for crop in crop_windows([record], 3, H, K, seed=0, count=50)}
    assert offsets == {0}


def test_offsets_are_uniform():
    record = _small(frames=H + 2 * K + 9)
    offsets = [crop.offset for crop in crop_windows([record], 2, H, K, seed=3, count=10_000)]
    counts = np.bincount(offsets, minlength=10)
    assert len(counts) == 10
    assert chisquare(counts).pvalue > 1e-3


def test_single_window_crop():
    record = _small(frames=30)
    crop = next(crop_windows([record], 1, H, K, seed=1))
    assert crop.length == H + K
    assert crop.features.shape == (H + K, 443)
    assert np.array_equal(crop.history_frames(0), crop.features[:H])
    assert np.array_equal(crop.window_frames(0), crop.features[H:])


def test_crop_history_matches_inference_encoding():
    record = _small(frames=40)
    crop = next(crop for crop in crop_windows([record], 2, H, K, seed=4, count=200) if crop.offset > 0)
    end = crop.offset + H
    expected = canonical_history(record.reactor.slice(0, end), record.actor.slice(0, end), H)
    np.testing.assert_allclose(crop.history_frames(0), expected, atol=1e-12)
    assert crop.transform.yaw == pytest.approx(record.reactor.root_yaw[crop.offset])


def test_consecutive_windows_share_boundaries():
    crop = next(crop_windows([_small(frames=40)], 3, H, K, seed=2))
    assert np.array_equal(crop.history_frames(1)[-1], crop.window_frames(0)[-1])
    assert np.array_equal(crop.history_frames(2), crop.features[H + 2 * K - H:H + 2 * K])


def test_short_records_are_skipped(caplog):
    long_record, short_record = _small(frames=40), _small(frames=12)
    with caplog.at_level(logging.WARNING):
        crops = list(crop_windows([short_record, long_record], 3, H, K, seed=0, count=20))
    assert {crop.record_index for crop in crops} == {1}
    assert 'Skipping record 0' in caplog.text


def test_no_usable_record():
    with pytest.raises(InvalidInputError):
        next(crop_windows([_small(frames=12)], 3, H, K))
