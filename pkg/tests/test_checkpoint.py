import struct

import numpy as np
import pytest

from ssacgan import checkpoint as ck
from ssacgan.tensor import Tensor
from ssacgan.trainer import TrainState, load_checkpoint, save_checkpoint

from conftest import tiny_config


@pytest.fixture
def records():
    rng = np.random.default_rng(0)
    return {"a": rng.standard_normal((2, 3)).astype(np.float32),
            "scalar": np.array([7.0], dtype=np.float32),
            "b.c": rng.standard_normal((1, 2, 2, 2)).astype(np.float32)}


class TestArchive:
    def test_layout(self, records):
        blob = ck.encode_records(records)
        assert blob[:4] == b"SSCK"
        version, count = struct.unpack("<HI", blob[4:10])
        assert (version, count) == (1, 3)
        (name_len,) = struct.unpack("<I", blob[10:14])
        assert blob[14:14 + name_len] == b"a"

    def test_roundtrip(self, records):
        back = ck.decode_records(ck.encode_records(records))
        assert list(back) == list(records)
        for k in records:
            assert back[k].tobytes() == records[k].tobytes()

    def test_save_load_save(self, records, tmp_path):
        first = ck.write_records(records, tmp_path / "a.ssck").read_bytes()
        second = ck.write_records(ck.read_records(tmp_path / "a.ssck"), tmp_path / "b.ssck").read_bytes()
        assert first == second

    @pytest.mark.parametrize("cut", [3, 8, 20, -1])
    def test_truncated(self, records, cut):
        with pytest.raises(ck.CheckpointError, match="corrupt"):
            ck.decode_records(ck.encode_records(records)[:cut])

    def test_trailing_bytes(self, records):
        with pytest.raises(ck.CheckpointError):
            ck.decode_records(ck.encode_records(records) + b"x")

    def test_bad_magic(self, records):
        with pytest.raises(ck.CheckpointError):
            ck.decode_records(b"XXXX" + ck.encode_records(records)[4:])

    def test_version_mismatch(self, records):
        blob = bytearray(ck.encode_records(records))
        blob[4:6] = struct.pack("<H", 2)
        with pytest.raises(ck.CheckpointVersionError):
            ck.decode_records(bytes(blob))

    @pytest.mark.parametrize("value", [0, 1, 65535, 2 ** 32 + 5, 2 ** 64 - 1])
    def test_limbs_exact(self, value):
        limbs = ck.int_to_limbs(value)
        assert limbs.dtype == np.float32
        assert ck.limbs_to_int(limbs) == value

    def test_limbs_range(self):
        with pytest.raises(ValueError):
            ck.int_to_limbs(2 ** 64)


class TestTrainStateCheckpoint:
    def test_forward_bit_identical_after_roundtrip(self, tmp_path):
        cfg = tiny_config(seed=2 ** 40 + 3)
        state = TrainState.fresh(cfg)
        path = save_checkpoint(state, tmp_path / "c.ssck")
        back = load_checkpoint(path)
        assert back.seed == cfg.seed and back.config_hash == cfg.config_hash()
        assert back.regime == "semi" and back.epoch == 0
        x = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 1, 32, 32)).astype(np.float32))
        for name in ("G", "F"):
            a = getattr(state.bundle, name)(x).data
            b = getattr(back.bundle, name)(x).data
            assert a.tobytes() == b.tobytes()

    def test_state_file_save_load_save(self, tmp_path):
        state = TrainState.fresh(tiny_config())
        first = save_checkpoint(state, tmp_path / "a.ssck").read_bytes()
        second = save_checkpoint(load_checkpoint(tmp_path / "a.ssck"), tmp_path / "b.ssck").read_bytes()
        assert first == second

    def test_truncated_state_file(self, tmp_path):
        path = save_checkpoint(TrainState.fresh(tiny_config()), tmp_path / "c.ssck")
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ck.CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_missing_record(self, tmp_path):
        rec = ck.read_records(save_checkpoint(TrainState.fresh(tiny_config()), tmp_path / "c.ssck"))
        del rec["meta.epoch"]
        ck.write_records(rec, tmp_path / "d.ssck")
        with pytest.raises(ck.CheckpointError):
            load_checkpoint(tmp_path / "d.ssck")
