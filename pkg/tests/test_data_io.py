import struct

import numpy as np
import pytest

from lgvlab.data import (IdxFormatError, InsufficientExamples, correct_mask, load_idx,
                         make_blobs, make_spirals, select_correct, write_idx_images,
                         write_idx_labels)
from lgvlab.model import Batch, ModelSpec
from lgvlab.training import TrainConfig, train
from lgvlab.weightio import WeightFileError, read_weights, sidecar_path, write_weights


def _bytes(ds):
    return b"".join(s.inputs.tobytes() + s.labels.tobytes() for s in (ds.train, ds.val, ds.test))


def test_blobs_deterministic():
    assert _bytes(make_blobs(4, 8, (20, 5, 10), 0.3, seed=9)) == \
        _bytes(make_blobs(4, 8, (20, 5, 10), 0.3, seed=9))
    assert _bytes(make_blobs(4, 8, (20, 5, 10), 0.3, seed=9)) != \
        _bytes(make_blobs(4, 8, (20, 5, 10), 0.3, seed=10))


def test_blobs_balanced_and_in_box():
    ds = make_blobs(4, 8, (200, 100, 200), 0.3, seed=1)
    for split, n in ((ds.train, 200), (ds.val, 100), (ds.test, 200)):
        assert np.bincount(split.labels).tolist() == [n] * 4
        assert split.inputs.min() >= 0.0 and split.inputs.max() <= 1.0


def test_blob_centers_far_apart():
    from lgvlab.data import blob_centers
    c = blob_centers(4, 16, 2.0, np.random.default_rng(0))
    d = np.linalg.norm(c[:, None] - c[None], axis=2)[np.triu_indices(4, 1)]
    np.testing.assert_allclose(d, 2.0)
    c = blob_centers(5, 2, 1.0, np.random.default_rng(0))
    d = np.linalg.norm(c[:, None] - c[None], axis=2)[np.triu_indices(5, 1)]
    assert d.min() >= 1.0 - 1e-12


def test_tight_blobs_linearly_separable():
    ds = make_blobs(4, 8, (50, 10, 50), 1e-3, seed=3)
    spec = ModelSpec((8, 4))
    w = train(spec, ds, TrainConfig(epochs=30, lr=0.5, batch_size=20, seed=0))
    from lgvlab.model import accuracy
    assert accuracy(spec, w, ds.test) == 1.0


def test_spirals():
    a = make_spirals(3, (30, 10, 10), 0.01, seed=4)
    assert _bytes(a) == _bytes(make_spirals(3, (30, 10, 10), 0.01, seed=4))
    assert np.bincount(a.train.labels).tolist() == [30] * 3
    clean = make_spirals(2, (100, 10, 10), 0.0, seed=4)
    x, y = clean.train.inputs, clean.train.labels
    d = np.linalg.norm(x[y == 0][:, None] - x[y == 1][None], axis=2)
    assert d.min() > 0
    with pytest.raises(ValueError):
        make_spirals(4, 10, 0.0, seed=0)


def test_idx_roundtrip(tmp_path):
    imgs = np.array([[[0, 255], [128, 7]], [[1, 2], [3, 4]], [[255, 255], [0, 0]]], np.uint8)
    write_idx_images(tmp_path / "i", imgs)
    write_idx_labels(tmp_path / "l", np.array([3, 1, 0]))
    b = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(np.rint(b.inputs * 255).astype(np.uint8), imgs.reshape(3, 4))
    assert b.inputs[0, 1] == 1.0 and b.labels.tolist() == [3, 1, 0]


def test_idx_errors(tmp_path):
    write_idx_images(tmp_path / "i", np.zeros((2, 2, 2), np.uint8))
    write_idx_labels(tmp_path / "l", np.array([0, 1, 1]))
    with pytest.raises(IdxFormatError, match="count mismatch"):
        load_idx(tmp_path / "i", tmp_path / "l")
    (tmp_path / "bad").write_bytes(struct.pack(">IIII", 0x0802, 1, 1, 1) + b"\x00")
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(tmp_path / "bad", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(tmp_path / "short", tmp_path / "l")


def _const_target(n_classes, d, cls):
    """Linear model that always predicts ``cls`` through its bias."""
    spec = ModelSpec((d, n_classes))
    w = np.zeros(spec.n_params)
    w[-n_classes + cls] = 1.0
    return spec, w


def test_select_correct_perfect_and_empty():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(30, 3))
    b = Batch(x, np.zeros(30, dtype=int))
    sub = select_correct([_const_target(2, 3, 0)], b, 10, seed=1)
    assert len(sub) == 10
    assert sub.inputs.tobytes() == select_correct([_const_target(2, 3, 0)], b, 10, 1).inputs.tobytes()
    with pytest.raises(InsufficientExamples) as e:
        select_correct([_const_target(2, 3, 1)], b, 1, seed=0)
    assert e.value.available == 0


def test_select_correct_matches_brute_force_intersection():
    ds = make_blobs(3, 4, (30, 10, 60), 0.5, seed=2)
    spec = ModelSpec((4, 8, 3), "relu")
    targets = [(spec, train(spec, ds, TrainConfig(epochs=3, lr=0.05, seed=s))) for s in (1, 2)]
    from lgvlab.model import predict
    ok = [set(np.flatnonzero(predict(s, w, ds.test.inputs) == ds.test.labels)) for s, w in targets]
    both = sorted(ok[0] & ok[1])
    assert np.flatnonzero(correct_mask(targets, ds.test)).tolist() == both
    sub = select_correct(targets, ds.test, min(10, len(both)), seed=0)
    for s, w in targets:
        assert np.all(predict(s, w, sub.inputs) == sub.labels)


def test_weight_file_roundtrip(tmp_path):
    spec = ModelSpec((3, 4, 2))
    w = np.random.default_rng(0).standard_normal((5, spec.n_params))
    path = write_weights(tmp_path / "a.lgvw", w, spec=spec, meta={"lr": 0.05})
    back, side = read_weights(path)
    assert back.tobytes() == w.tobytes()
    assert side["K"] == 5 and side["p"] == spec.n_params and side["meta"]["lr"] == 0.05
    assert side["spec_hash"] == spec.spec_hash
    raw = path.read_bytes()
    assert raw[:4] == b"LGVW" and struct.unpack("<IBIQ", raw[4:21]) == (1, 1, 5, spec.n_params)
    write_weights(tmp_path / "b.lgvw", w, dtype="f32")
    back32, _ = read_weights(tmp_path / "b.lgvw")
    np.testing.assert_allclose(back32, w, rtol=1e-6)


def test_weight_file_errors(tmp_path):
    path = write_weights(tmp_path / "a.lgvw", np.ones((2, 3)))
    raw = path.read_bytes()
    (tmp_path / "t.lgvw").write_bytes(raw[:-4])
    with pytest.raises(WeightFileError):
        read_weights(tmp_path / "t.lgvw")
    (tmp_path / "m.lgvw").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(WeightFileError):
        read_weights(tmp_path / "m.lgvw")
    (tmp_path / "v.lgvw").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(WeightFileError):
        read_weights(tmp_path / "v.lgvw")
    assert sidecar_path(path).name == "a.lgvw.json"
