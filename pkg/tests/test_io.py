import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxreg.io import (
    Checkpoint,
    VolumeIOError,
    load_checkpoint,
    load_field,
    load_labels,
    load_volume,
    save_checkpoint,
    save_field,
    save_labels,
    save_volume,
)
from voxreg.network import ArchConfig, build_network
from voxreg.trainer import to_checkpoint


def _write_raw(tmp_path, name, values, dims, dtype="f32", kind="volume"):
    (tmp_path / f"{name}.raw").write_bytes(np.asarray(values, dtype="<f4" if dtype == "f32" else "<u2").tobytes())
    (tmp_path / f"{name}.json").write_text(json.dumps({"dims": dims, "dtype": dtype, "kind": kind}))
    return tmp_path / name


class TestVolumes:
    def test_index_order(self, tmp_path):
        v = load_volume(_write_raw(tmp_path, "v", np.arange(8), [2, 2, 2]))
        assert v[1, 0, 0] == 1 and v[0, 1, 0] == 2 and v[0, 0, 1] == 4

    def test_flat_index_formula(self, tmp_path, rng):
        dims = (3, 4, 5)
        vals = rng.standard_normal(60).astype(np.float32)
        v = load_volume(_write_raw(tmp_path, "v", vals, list(dims)))
        x, y, z = 2, 1, 3
        assert v[x, y, z] == vals[x + dims[0] * (y + dims[1] * z)]

    def test_large_header_dims(self, tmp_path):
        dims = [160, 192, 224]
        (tmp_path / "big.raw").write_bytes(bytes(4 * 160 * 192 * 224))
        (tmp_path / "big.json").write_text(json.dumps({"dims": dims, "dtype": "f32", "kind": "volume"}))
        assert load_volume(tmp_path / "big").shape == (160, 192, 224)

    def test_truncated_payload(self, tmp_path):
        with pytest.raises(VolumeIOError, match="size mismatch"):
            load_volume(_write_raw(tmp_path, "v", np.arange(7), [2, 2, 2]))

    def test_non_finite_names_index(self, tmp_path):
        vals = np.arange(8, dtype=np.float32)
        vals[5] = np.nan
        with pytest.raises(VolumeIOError, match="index 5"):
            load_volume(_write_raw(tmp_path, "v", vals, [2, 2, 2]))

    def test_missing_and_wrong_kind(self, tmp_path):
        with pytest.raises(VolumeIOError):
            load_volume(tmp_path / "nothing")
        path = _write_raw(tmp_path, "v", np.arange(8), [2, 2, 2], kind="field")
        with pytest.raises(VolumeIOError, match="kind"):
            load_volume(path)

    def test_round_trip_bytes(self, tmp_path, rng):
        v = rng.standard_normal((8, 8, 8)).astype(np.float32)
        save_volume(v, tmp_path / "a")
        back = load_volume(tmp_path / "a.raw")
        np.testing.assert_array_equal(back, v)
        save_volume(back, tmp_path / "b")
        assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()

    def test_normalize(self, tmp_path):
        save_volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2) * 3 + 1, tmp_path / "v")
        v = load_volume(tmp_path / "v", normalize=True)
        assert v.min() == 0 and v.max() == 1

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            save_volume(np.zeros((2, 2, 2)), tmp_path / "missing_dir" / "v")

    def test_rejects_non_finite_on_save(self, tmp_path):
        with pytest.raises(ValueError):
            save_volume(np.full((2, 2, 2), np.inf), tmp_path / "v")


class TestFieldsAndLabels:
    def test_field_blocks(self, tmp_path, rng):
        u = rng.standard_normal((3, 2, 3, 4)).astype(np.float32)
        save_field(u, tmp_path / "u")
        flat = np.frombuffer((tmp_path / "u.raw").read_bytes(), dtype="<f4")
        np.testing.assert_array_equal(flat[:24], u[0].ravel(order="F"))
        np.testing.assert_array_equal(flat[24:48], u[1].ravel(order="F"))
        np.testing.assert_array_equal(load_field(tmp_path / "u"), u)

    def test_labels_histogram(self, tmp_path, rng):
        lab = rng.integers(0, 30, size=(10, 9, 8)).astype(np.uint16)
        save_labels(lab, tmp_path / "l")
        back = load_labels(tmp_path / "l")
        assert back.dtype == np.uint16
        np.testing.assert_array_equal(np.bincount(back.ravel(), minlength=30), np.bincount(lab.ravel(), minlength=30))

    def test_label_range(self, tmp_path):
        with pytest.raises(ValueError):
            save_labels(np.full((2, 2, 2), 70000), tmp_path / "l")

    @settings(max_examples=20, deadline=None)
    @given(
        dims=st.tuples(*[st.integers(1, 6)] * 3),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_round_trip_property(self, tmp_path_factory, dims, seed):
        d = tmp_path_factory.mktemp("rt")
        r = np.random.default_rng(seed)
        v = r.standard_normal(dims).astype(np.float32)
        u = r.standard_normal((3,) + dims).astype(np.float32)
        lab = r.integers(0, 2**16, size=dims).astype(np.uint16)
        save_volume(v, d / "v")
        save_field(u, d / "u")
        save_labels(lab, d / "l")
        np.testing.assert_array_equal(load_volume(d / "v"), v)
        np.testing.assert_array_equal(load_field(d / "u"), u)
        np.testing.assert_array_equal(load_labels(d / "l"), lab)


class TestCheckpoint:
    @pytest.fixture
    def params(self):
        return build_network(ArchConfig(base_channels=4, max_channels=8, branch_channels=4, levels=3))

    def test_round_trip(self, tmp_path, params):
        save_checkpoint(to_checkpoint(params), tmp_path / "c.vxrg")
        ck = load_checkpoint(tmp_path / "c.vxrg", expected_arch_hash=params.arch_hash)
        assert list(ck.tensors) == [n for n, _ in params]
        for name, t in params:
            np.testing.assert_array_equal(ck.tensors[name], t.data)
        assert ck.optimizer is None and ck.step == 0

    def test_wrong_hash(self, tmp_path, params):
        save_checkpoint(to_checkpoint(params), tmp_path / "c.vxrg")
        with pytest.raises(VolumeIOError, match="mismatch"):
            load_checkpoint(tmp_path / "c.vxrg", expected_arch_hash="deadbeef")

    def test_layout(self, tmp_path):
        ck = Checkpoint({"arch_hash": "x"}, {"a": np.arange(6, dtype=np.float32).reshape(2, 3)}, step=7)
        save_checkpoint(ck, tmp_path / "c")
        buf = (tmp_path / "c").read_bytes()
        assert buf[:4] == b"VXRG"
        version, n = struct.unpack("<II", buf[4:12])
        assert version == 1 and json.loads(buf[12 : 12 + n])["step"] == 7
        back = load_checkpoint(tmp_path / "c")
        assert back.step == 7 and back.config == {"arch_hash": "x"}

    @pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing"])
    def test_corrupt(self, tmp_path, params, mutate):
        path = tmp_path / "c.vxrg"
        save_checkpoint(to_checkpoint(params), path)
        buf = bytearray(path.read_bytes())
        if mutate == "magic":
            buf[:4] = b"XXXX"
        elif mutate == "version":
            buf[4:8] = struct.pack("<I", 99)
        elif mutate == "truncate":
            buf = buf[:-3]
        else:
            buf += b"\0"
        path.write_bytes(bytes(buf))
        with pytest.raises(VolumeIOError):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(VolumeIOError):
            load_checkpoint(os.fspath(tmp_path / "none.vxrg"))
