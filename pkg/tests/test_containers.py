"""Round-trips and corruption handling for the binary file formats."""

import numpy as np
import pytest

from mmsent.containers import (
    load_checkpoint,
    load_embedding_table,
    load_feature_cache,
    save_checkpoint,
    save_embedding_table,
    save_feature_cache,
)
from mmsent.dsp import FeatureSequence
from mmsent.errors import FormatError
from mmsent.tensor import Tensor


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        path = tmp_path / "model.ckpt"
        tensors = {
            "enc/w": rng.normal(size=(4, 7)),
            "enc/b": rng.normal(size=7),
            "head": Tensor(rng.normal(size=(2, 3, 4))),
        }
        save_checkpoint(path, tensors)
        out = load_checkpoint(path)
        assert sorted(out) == sorted(tensors)
        np.testing.assert_array_equal(out["enc/w"], tensors["enc/w"])
        np.testing.assert_array_equal(out["head"], tensors["head"].data)

    def test_bytes_independent_of_insertion_order(self, tmp_path, rng):
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=5)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, {"x": a, "y": b})
        save_checkpoint(p2, {"y": b, "x": a})
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"w": rng.normal(size=(8, 8))})
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_scalar_entry(self, tmp_path):
        path = tmp_path / "s.ckpt"
        save_checkpoint(path, {"step": np.float64(7.0)})
        out = load_checkpoint(path)
        assert out["step"].shape == ()
        assert float(out["step"]) == 7.0


class TestFeatureCache:
    def test_roundtrip(self, tmp_path, rng):
        path = tmp_path / "u1.mfcc.feat"
        seq = FeatureSequence(rng.normal(size=(9, 13)), "mfcc", 43.066)
        save_feature_cache(path, seq)
        out = load_feature_cache(path)
        assert out.kind == "mfcc"
        assert out.frame_rate == seq.frame_rate
        np.testing.assert_array_equal(out.data, seq.data)

    def test_magic_is_sixteen_bytes(self, tmp_path, rng):
        path = tmp_path / "u.feat"
        save_feature_cache(path, FeatureSequence(rng.normal(size=(2, 2)), "rmse", 10.0))
        blob = path.read_bytes()
        assert blob[:16] == b"MMSENT-FEATCACHE"
        assert blob[16] == 1  # format version

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "u.feat"
        path.write_bytes(b"\x00" * 40)
        with pytest.raises(FormatError, match="magic"):
            load_feature_cache(path)

    def test_truncated(self, tmp_path, rng):
        path = tmp_path / "u.feat"
        save_feature_cache(path, FeatureSequence(rng.normal(size=(6, 4)), "tonnetz", 20.0))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_feature_cache(path)


class TestEmbeddingTable:
    def test_roundtrip(self, tmp_path, rng):
        path = tmp_path / "emb.bin"
        table = {
            "<unk>": rng.normal(size=6),
            "great": rng.normal(size=6),
            "naïve": rng.normal(size=6),  # multi-byte UTF-8
        }
        save_embedding_table(path, table, 6)
        out, width = load_embedding_table(path)
        assert width == 6
        assert sorted(out) == sorted(table)
        for token in table:
            np.testing.assert_array_equal(out[token], table[token])

    def test_width_mismatch_rejected(self, tmp_path, rng):
        with pytest.raises(FormatError):
            save_embedding_table(tmp_path / "e.bin", {"a": rng.normal(size=4)}, 6)

    def test_truncated(self, tmp_path, rng):
        path = tmp_path / "e.bin"
        save_embedding_table(path, {"tok": rng.normal(size=8)}, 8)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError, match="truncated"):
            load_embedding_table(path)
