import hashlib

import numpy as np
import pytest

from mambahawkes.archive import ArchiveError, file_sha256, load_archive, save_archive
from mambahawkes.backbone import MHPModel
from mambahawkes.checkpoints import (
    checkpoint_kind,
    load_hawkes,
    load_mhp,
    params_equal,
    save_hawkes,
    save_mhp,
)
from mambahawkes.hawkes import HawkesModel
from mambahawkes.intensity import IntensityHead
from mambahawkes.training import NextEventHead


def test_round_trip_and_hash(tmp_path, rng):
    t = {"b": rng.normal(size=(2, 3)), "a": np.array(1.5), "c": np.zeros(0)}
    digest = save_archive(tmp_path / "x.tpa", "demo", t, {"note": "hi"})
    assert digest == file_sha256(tmp_path / "x.tpa")
    assert digest == hashlib.sha256((tmp_path / "x.tpa").read_bytes()).hexdigest()
    kind, meta, back = load_archive(tmp_path / "x.tpa", expect_kind="demo")
    assert kind == "demo" and meta == {"note": "hi"}
    for k in t:
        assert back[k].shape == t[k].shape and back[k].tobytes() == t[k].tobytes()


def test_same_content_same_bytes(tmp_path, rng):
    t = {"w": rng.normal(size=4), "v": rng.normal(size=2)}
    h1 = save_archive(tmp_path / "1", "k", t, {"z": 1, "a": 2})
    h2 = save_archive(tmp_path / "2", "k", dict(reversed(list(t.items()))), {"a": 2, "z": 1})
    assert h1 == h2


def test_corrupt_inputs(tmp_path):
    p = tmp_path / "x.tpa"
    save_archive(p, "k", {"w": np.arange(8.0)})
    data = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(ArchiveError, match="magic"):
        load_archive(tmp_path / "magic")
    (tmp_path / "short").write_bytes(data[:-8])
    with pytest.raises(ArchiveError, match="truncated"):
        load_archive(tmp_path / "short")
    with pytest.raises(ArchiveError, match="expected"):
        load_archive(p, expect_kind="other")
    with pytest.raises(ArchiveError, match="non-finite"):
        save_archive(p, "k", {"w": np.array([np.nan])})


def test_mhp_and_hawkes_checkpoints(tmp_path):
    m = MHPModel.init(2, seed=0, d_model=4, d_state=3, n_blocks=1, d_hidden=5, d_out=3)
    for head in (IntensityHead.init(2, 3, seed=1), NextEventHead.init(2, 3, seed=1)):
        save_mhp(tmp_path / "m", m, head, {"seed": 0})
        m2, h2, meta = load_mhp(tmp_path / "m")
        assert type(h2) is type(head) and meta["seed"] == 0
        assert params_equal(m.params, m2.params) and params_equal(head.params, h2.params)
    hk = HawkesModel([0.5, 0.2], [[0.1, 0.0], [0.2, 0.3]], [[1.0, 2.0], [1.0, 1.0]])
    save_hawkes(tmp_path / "h", hk)
    back, _ = load_hawkes(tmp_path / "h")
    assert checkpoint_kind(tmp_path / "h") == "hawkes"
    np.testing.assert_array_equal(back.alpha, hk.alpha)
    with pytest.raises(ArchiveError):
        load_mhp(tmp_path / "h")
