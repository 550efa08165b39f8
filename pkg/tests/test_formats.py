import struct

import numpy as np
import pytest

from trajbayes import tensor as T
from trajbayes.formats import (CkptMeta, FormatError, PredictionFile, checkpoint_name, file_digest, load_checkpoint,
                               load_dataset, load_predictions, save_checkpoint, save_dataset, save_predictions)
from trajbayes.segnet import NetConfig, build
from trajbayes.synthdata import PhantomParams, generate_split


def test_checkpoint_roundtrip(tmp_path):
    params = build(NetConfig(base_width=2, depth=2), T.Rng(0)).params
    params.bn_stale = True
    path = tmp_path / checkpoint_name(17)
    save_checkpoint(path, params, CkptMeta(17, 1, 17, 0.25))
    back, meta = load_checkpoint(path)
    assert back.bit_equal(params) and back.bn_stale
    assert (meta.epoch, meta.cycle, meta.t_c, meta.train_loss) == (17, 1, 17, 0.25)
    assert path.name == "ckpt_t00017.bin"


def test_checkpoint_bad_magic_version_and_truncation(tmp_path):
    params = T.ParamSet({"a.weight": np.ones(3, np.float32)})
    path = tmp_path / "c.bin"
    save_checkpoint(path, params, CkptMeta(0, 1, 0, 0.0))
    raw = path.read_bytes()
    (tmp_path / "m.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "v.bin").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    (tmp_path / "t.bin").write_bytes(raw[:-3])
    (tmp_path / "x.bin").write_bytes(raw + b"\0")
    for name, msg in [("m.bin", "magic"), ("v.bin", "version"), ("t.bin", "truncated"), ("x.bin", "trailing")]:
        with pytest.raises(FormatError, match=msg):
            load_checkpoint(tmp_path / name)


def test_dataset_roundtrip(tmp_path):
    d = generate_split(PhantomParams(size=32), 3, seed=1).concat(
        generate_split(PhantomParams(size=32).shifted("OOD-B"), 2, seed=2))
    save_dataset(tmp_path / "d.tbd", d)
    back = load_dataset(tmp_path / "d.tbd")
    np.testing.assert_array_equal(back.images, d.images)
    np.testing.assert_array_equal(back.labels, d.labels)
    np.testing.assert_array_equal(back.seeds, d.seeds)
    assert back.domains == d.domains
    save_dataset(tmp_path / "e.tbd", d)
    assert file_digest(tmp_path / "d.tbd") == file_digest(tmp_path / "e.tbd")


def test_dataset_wrong_magic(tmp_path):
    params = T.ParamSet({"a.weight": np.ones(3, np.float32)})
    save_checkpoint(tmp_path / "c.bin", params, CkptMeta(0, 1, 0, 0.0))
    with pytest.raises(FormatError, match="magic"):
        load_dataset(tmp_path / "c.bin")


def test_prediction_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    probs = rng.random((2, 4, 8, 8)).astype(np.float32)
    ent = rng.random((2, 8, 8)).astype(np.float32)
    pred = PredictionFile({"method": "vanilla"}, np.array([5, 2**63 + 1], dtype=np.uint64), probs, ent)
    save_predictions(tmp_path / "p.tbp", pred)
    back = load_predictions(tmp_path / "p.tbp")
    assert back.header["method"] == "vanilla" and back.header["count"] == 2
    np.testing.assert_array_equal(back.seeds, pred.seeds)
    np.testing.assert_array_equal(back.probs, probs)
    np.testing.assert_array_equal(back.entropy, ent)
