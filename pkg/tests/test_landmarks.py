import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geodyn.landmarks import (AugmentConfig, DataError, LandmarkSequence, MovementClassMap, augment,
                              flip, load_manifest, load_sequences, mirror_pad, movement_label,
                              normalize_frames, normalize_sequence, rotate, select_inference_window,
                              subsample_random, window_scores, write_sequences)


def seq_of(frames, sid="s", label="live"):
    return LandmarkSequence(sid, label, 30.0, np.asarray(frames, dtype=np.float64))


# -- loading -------------------------------------------------------------------

def _record(sid, n, t=2, label="live"):
    return {"id": sid, "label": label, "fps": 30, "frames": [[[float(i), float(j)] for i in range(n)]
                                                            for j in range(t)]}


def test_load_two_records_in_order(tmp_path):
    path = tmp_path / "l.jsonl"
    path.write_text("\n".join(json.dumps(_record(s, 3)) for s in ("b", "a")) + "\n")
    seqs = load_sequences(path, 3)
    assert [s.id for s in seqs] == ["b", "a"]
    assert seqs[0].frames.shape == (2, 3, 2)


def test_load_wrong_landmark_count_names_record(tmp_path):
    path = tmp_path / "l.jsonl"
    path.write_text(json.dumps(_record("short_one", 245)) + "\n")
    with pytest.raises(DataError, match="short_one"):
        load_sequences(path, 246)


def test_load_empty_file(tmp_path):
    path = tmp_path / "l.jsonl"
    path.write_text("")
    assert load_sequences(path, 5) == []


def test_load_rejects_malformed(tmp_path):
    path = tmp_path / "l.jsonl"
    path.write_text('{"id": "x", "label": "live"}\n')
    with pytest.raises(DataError, match="line 1"):
        load_sequences(path, 3)
    path.write_text("not json\n")
    with pytest.raises(DataError):
        load_sequences(path, 3)


def test_write_then_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    seqs = [seq_of(rng.normal(size=(4, 3, 2)), f"s{i}") for i in range(3)]
    write_sequences(seqs, tmp_path / "l.jsonl")
    back = load_sequences(tmp_path / "l.jsonl", 3)
    for a, b in zip(seqs, back):
        assert a.id == b.id and np.array_equal(a.frames, b.frames)


def test_manifest_parsing(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("a train\nb test\n")
    assert load_manifest(path) == {"a": "train", "b": "test"}
    path.write_text("a train\na dev\n")
    with pytest.raises(DataError):
        load_manifest(path)


# -- normalization --------------------------------------------------------------------

def test_normalize_examples():
    out = normalize_frames(np.array([[[2, 10], [3, 20], [4, 30]]], dtype=float))
    np.testing.assert_array_equal(out[0], [[0, 0], [0.5, 0.5], [1, 1]])
    out = normalize_frames(np.array([[[5, 1], [5, 2], [5, 1]]], dtype=float))
    np.testing.assert_array_equal(out[0, :, 0], 0.5)
    np.testing.assert_array_equal(out[0, :, 1], [0, 1, 0])


def test_normalize_affine_example():
    frame = np.array([[[2, 10], [3, 20], [4, 30]]], dtype=float)
    mapped = frame * [3, 2] + [7, -1]
    np.testing.assert_array_equal(normalize_frames(mapped), normalize_frames(frame))


# quarter-unit grid: nonzero spans stay well above translation round-off
frames_strategy = arrays(np.int64, st.tuples(st.integers(1, 3), st.integers(2, 6), st.just(2)),
                         elements=st.integers(-4000, 4000)).map(lambda a: a / 4.0)


@settings(max_examples=200)
@given(frames_strategy, st.floats(0.01, 100), st.floats(0.01, 100), st.floats(-1e3, 1e3),
       st.floats(-1e3, 1e3))
def test_normalize_idempotent_and_affine_invariant(frames, sx, sy, tx, ty):
    once = normalize_frames(frames)
    np.testing.assert_allclose(normalize_frames(once), once, atol=1e-9)
    mapped = frames * [sx, sy] + [tx, ty]
    spans = np.ptp(frames, axis=1)
    # keep cases where the affine map preserves which axes are constant
    if np.all((np.ptp(mapped, axis=1) == 0) == (spans == 0)):
        np.testing.assert_allclose(normalize_frames(mapped), once, atol=1e-9)
    assert once.min() >= 0 and once.max() <= 1


def test_normalize_sequence_keeps_metadata():
    s = seq_of(np.arange(12, dtype=float).reshape(2, 3, 2), "q", "replay")
    out = normalize_sequence(s)
    assert (out.id, out.label, out.fps) == ("q", "replay", 30.0)


# -- temporal sampling -------------------------------------------------------------------

def _tagged(t, n=2):
    """Frame k carries the value k everywhere, so indices can be read back."""
    return seq_of(np.repeat(np.arange(t, dtype=float)[:, None, None], n, axis=1).repeat(2, axis=2))


def _idx(seq):
    return seq.frames[:, 0, 0].astype(int).tolist()


def test_mirror_pad_examples():
    assert _idx(mirror_pad(_tagged(3), 5)) == [0, 1, 2, 1, 0]
    assert _idx(mirror_pad(_tagged(1), 4)) == [0, 0, 0, 0]
    assert _idx(mirror_pad(_tagged(6), 6)) == list(range(6))
    with pytest.raises(ValueError):
        mirror_pad(_tagged(7), 6)


@given(st.integers(1, 20), st.integers(0, 40))
def test_mirror_pad_keeps_prefix_and_moves_by_one(t, extra):
    idx = _idx(mirror_pad(_tagged(t), t + extra))
    assert idx[:t] == list(range(t))
    assert len(idx) == t + extra
    if t > 1:
        assert all(abs(a - b) == 1 for a, b in zip(idx, idx[1:]))


def test_subsample_contract_and_determinism():
    s = _tagged(100)
    out = subsample_random(s, 64, np.random.default_rng(3))
    idx = _idx(out)
    assert len(idx) == 64 and all(a < b for a, b in zip(idx, idx[1:]))
    assert idx == _idx(subsample_random(s, 64, np.random.default_rng(3)))
    assert _idx(subsample_random(_tagged(64), 64, np.random.default_rng(0))) == list(range(64))
    assert _idx(subsample_random(_tagged(3), 5, np.random.default_rng(0))) == [0, 1, 2, 1, 0]


def _burst_sequence(t=120, start=20, stop=83, seed=0):
    rng = np.random.default_rng(seed)
    frames = np.zeros((t, 4, 2))
    frames[start:stop + 1] = rng.normal(size=(stop - start + 1, 4, 2))
    return seq_of(frames)


def _exhaustive_window(frames, length):
    best, best_start = -1.0, 0
    for start in range(frames.shape[0] - length + 1):
        w = frames[start:start + length]
        score = 0.0
        for n in range(w.shape[1]):
            for c in range(2):
                v = w[:, n, c]
                score += float(((v - v.mean()) ** 2).mean())
        if score > best + 1e-12:
            best, best_start = score, start
    return best_start


def test_window_selects_motion_burst():
    s = _burst_sequence()
    out = select_inference_window(s, 64)
    np.testing.assert_array_equal(out.frames, s.frames[20:84])
    assert _exhaustive_window(s.frames, 64) == 20


@pytest.mark.parametrize("seed", range(10))
def test_window_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(rng.integers(10, 30), 3, 2)) * rng.uniform(0.1, 3, size=(1, 3, 1))
    length = int(rng.integers(2, 9))
    start = _exhaustive_window(frames, length)
    np.testing.assert_allclose(window_scores(frames, length)[start],
                               window_scores(frames, length).max(), rtol=1e-12)
    chosen = select_inference_window(seq_of(frames), length).frames
    np.testing.assert_array_equal(chosen, frames[start:start + length])


def test_window_identity_and_ties():
    s = _tagged(16)
    assert _idx(select_inference_window(s, 16)) == list(range(16))
    still = seq_of(np.ones((30, 3, 2)))
    out = select_inference_window(still, 8)
    np.testing.assert_array_equal(out.frames, still.frames[:8])
    flat = window_scores(np.ones((30, 3, 2)), 8)
    assert np.all(flat == 0)


# -- augmentation --------------------------------------------------------------------

def test_augment_identity_when_disabled():
    rng = np.random.default_rng(0)
    s = seq_of(rng.normal(size=(5, 4, 2)))
    out = augment(s, rng, AugmentConfig(rotation_prob=0.0, flip_prob=0.0))
    np.testing.assert_array_equal(out.frames, s.frames)


def test_flip_twice_is_identity():
    rng = np.random.default_rng(1)
    frames = rng.normal(size=(5, 4, 2))
    perm = [1, 0, 3, 2]
    np.testing.assert_allclose(flip(flip(frames, perm), perm), frames, atol=1e-9)


def test_rotation_inverse():
    rng = np.random.default_rng(2)
    frames = rng.normal(size=(5, 4, 2))
    centre = frames.reshape(-1, 2).mean(axis=0)
    back = rotate(rotate(frames, 0.3, centre), -0.3, centre)
    np.testing.assert_allclose(back, frames, atol=1e-9)


def test_augment_preserves_distances():
    rng = np.random.default_rng(4)
    s = seq_of(rng.normal(size=(3, 5, 2)))
    out = augment(s, rng, AugmentConfig(rotation_prob=1.0, flip_prob=1.0), [0, 1, 2, 3, 4])
    d0 = np.linalg.norm(s.frames[:, :, None] - s.frames[:, None], axis=-1)
    d1 = np.linalg.norm(out.frames[:, :, None] - out.frames[:, None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-9)


def test_augment_rejects_bad_permutation():
    s = seq_of(np.zeros((2, 3, 2)))
    with pytest.raises(DataError):
        augment(s, np.random.default_rng(0), AugmentConfig(), [0, 1])


# -- labels ------------------------------------------------------------------------

def test_movement_labels():
    cmap = MovementClassMap()
    assert movement_label("live", cmap) == (1, 0)
    assert movement_label("replay", cmap) == (1, 1)
    assert movement_label("print", cmap) == (0, 2)
    for label in ("print_rigid", "print_bent", "mask_rigid"):
        assert movement_label(label, cmap) == (0, 2)
    with pytest.raises(DataError):
        movement_label("hologram", cmap)


def test_class_map_roundtrip_and_validation():
    cmap = MovementClassMap()
    assert MovementClassMap.from_dict(cmap.to_dict()) == cmap
    with pytest.raises(ValueError):
        MovementClassMap.from_dict({"bogus": []})


def test_sequence_validation():
    with pytest.raises(DataError):
        seq_of(np.zeros((0, 3, 2)))
    with pytest.raises(DataError):
        seq_of(np.zeros((2, 3, 3)))
    assert math.isclose(seq_of(np.zeros((2, 3, 2))).fps, 30.0)
