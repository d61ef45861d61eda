import numpy as np
import pytest

from userembed import tensor as T
from userembed.model import UserModel
from userembed.snapshot import (
    ModelSnapshot,
    SnapshotFormatError,
    load_snapshot,
    model_from_snapshot,
    save_snapshot,
    take_snapshot,
)

from test_model import make_features, tiny_config


def test_round_trip_is_bit_exact(tmp_path):
    cfg = tiny_config()
    model = UserModel(cfg, seed=5)
    snap = take_snapshot(model, version=3, trained_through_day=7)
    path = tmp_path / "snap.bin"
    save_snapshot(snap, path)
    back = load_snapshot(path)
    assert back.version == 3
    assert back.trained_through_day == 7
    assert back.config_hash == cfg.config_hash()
    assert set(back.params) == set(snap.params)
    for name in snap.params:
        assert back.params[name].tobytes() == snap.params[name].tobytes()


def test_save_is_deterministic(tmp_path):
    cfg = tiny_config()
    model = UserModel(cfg, seed=5)
    snap = take_snapshot(model, 1, 0)
    d1 = save_snapshot(snap, tmp_path / "a.bin")
    d2 = save_snapshot(snap, tmp_path / "b.bin")
    assert d1 == d2
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_corruption_detected(tmp_path):
    cfg = tiny_config()
    model = UserModel(cfg, seed=5)
    save_snapshot(take_snapshot(model, 1, 0), tmp_path / "snap.bin")
    raw = bytearray((tmp_path / "snap.bin").read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "snap.bin").write_bytes(bytes(raw))
    with pytest.raises(SnapshotFormatError, match="checksum"):
        load_snapshot(tmp_path / "snap.bin")


def test_model_from_snapshot_reproduces_forward(tmp_path):
    cfg = tiny_config()
    model = UserModel(cfg, seed=6)
    feats = make_features(cfg, np.random.default_rng(0))
    want = model.user_embeddings(feats)
    snap = take_snapshot(model, 1, 0)
    save_snapshot(snap, tmp_path / "snap.bin")
    clone = model_from_snapshot(cfg, load_snapshot(tmp_path / "snap.bin"))
    got = clone.user_embeddings(feats)
    np.testing.assert_array_equal(want, got)


def test_inference_model_records_no_tape(tmp_path):
    cfg = tiny_config()
    model = UserModel(cfg, seed=6)
    clone = model_from_snapshot(cfg, take_snapshot(model, 1, 0))
    feats = make_features(cfg, np.random.default_rng(1))
    T.tape_clear()
    clone.tower_forward(feats)
    assert T.tape_size() == 0


def test_config_hash_mismatch_rejected():
    cfg = tiny_config()
    other = tiny_config(tasks=1)
    model = UserModel(cfg, seed=6)
    snap = take_snapshot(model, 1, 0)
    with pytest.raises(SnapshotFormatError, match="config hash"):
        model_from_snapshot(other, snap)


def test_version_must_be_positive():
    with pytest.raises(ValueError):
        ModelSnapshot(version=0, trained_through_day=0, config_hash="0" * 64, params={})
