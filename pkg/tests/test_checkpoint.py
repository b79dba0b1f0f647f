import numpy as np
import pytest

import checkpoint
from checkpoint import Checkpoint, ParamSet
from conftest import tiny_config
from errors import CrcError, MagicError, TruncatedStreamError
from model import CodecModel


@pytest.fixture
def saved(model, tmp_path):
    path = tmp_path / "model.ckpt"
    model.save(path)
    return path


class TestParamSet:
    def test_duplicate_name(self):
        params = ParamSet()
        params.add("g_a.out.weight", np.zeros(3))
        with pytest.raises(ValueError):
            params.add("g_a.out.weight", np.zeros(3))

    def test_group_splits_on_first_dot(self):
        params = ParamSet()
        for name in ("g_a.down0.conv1.weight", "g_as.x", "g_a.out.bias", "prior.matrix0"):
            params.add(name, np.zeros(1))
        assert params.group("g_a") == ["g_a.down0.conv1.weight", "g_a.out.bias"]

    def test_block_round_trip_keeps_order_and_values(self):
        params = ParamSet()
        params.add("b", np.arange(6.0).reshape(2, 3))
        params.add("a", np.array(3.5))
        back, end = ParamSet.from_bytes(params.to_bytes())
        assert list(back) == ["b", "a"]
        assert end == len(params.to_bytes())
        np.testing.assert_array_equal(back["b"].data, params["b"].data)
        assert back["a"].shape == ()


class TestCheckpointFile:
    def test_round_trip(self, model, saved):
        loaded = CodecModel.load(saved)
        assert loaded.model_hash == model.model_hash
        assert loaded.config == model.config
        assert loaded.gumbel_seed == model.gumbel_seed
        np.testing.assert_array_equal(loaded.scale_table, model.scale_table)
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name].data, model.params[name].data)

    def test_tables_are_stored_verbatim(self, model, saved):
        tables = CodecModel.load(saved).tables
        for grid, expected in ((tables.gaussian, model.tables.gaussian), (tables.factorized, model.tables.factorized)):
            assert len(grid) == len(expected)
            for row, row_expected in zip(grid, expected):
                for t, e in zip(row, row_expected):
                    assert t.s_min == e.s_min and t.escape == e.escape
                    np.testing.assert_array_equal(t.cdf, e.cdf)

    def test_missing_tables_round_trip_as_none(self, tmp_path):
        m = CodecModel.initialize(tiny_config(), seed=3, gumbel_seed=3)
        m.save(tmp_path / "bare.ckpt")
        assert checkpoint.load(tmp_path / "bare.ckpt").tables is None

    def test_hash_is_stable_over_save_load(self, model, saved):
        ckpt = checkpoint.load(saved)
        assert ckpt.model_hash == model.model_hash
        assert len(ckpt.model_hash) == 32

    def test_hash_covers_weights_seed_and_config(self, model):
        base = model.model_hash
        other_seed = CodecModel(model.params, model.config, model.gumbel_seed + 1)
        assert other_seed.model_hash != base
        assert model.with_strategy("random").model_hash != base
        tweaked = ParamSet()
        for name, tensor in model.params.items():
            tweaked.add(name, tensor.data.copy())
        first = next(iter(tweaked))
        tweaked[first].data.flat[0] += 1e-12
        assert CodecModel(tweaked, model.config, model.gumbel_seed).model_hash != base

    def test_flipped_weight_byte_fails_crc(self, model, saved):
        data = bytearray(saved.read_bytes())
        name, tensor = next(iter(model.params.items()))
        first_value = 8 + 4 + 2 + len(name.encode()) + 1 + 4 * tensor.ndim
        data[first_value + 3] ^= 0x10
        with pytest.raises(CrcError):
            checkpoint.from_bytes(bytes(data))

    def test_bad_magic(self, saved):
        data = saved.read_bytes()
        with pytest.raises(MagicError):
            checkpoint.from_bytes(b"X" + data[1:])

    def test_truncated(self, saved):
        data = saved.read_bytes()
        with pytest.raises(TruncatedStreamError):
            checkpoint.from_bytes(data[:-10])

    def test_checkpoint_dataclass_hash_without_block(self, model):
        ckpt = Checkpoint(model.params, model.config_json(), model.gumbel_seed, model.scale_table)
        assert ckpt.model_hash == model.model_hash
