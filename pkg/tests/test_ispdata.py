import cv2
import numpy as np
import pytest

from errors import EXIT_USAGE, CorpusError, ShapeError
from ispdata import (
    RAW_MAX,
    RECIPES,
    apply_isp,
    degrade_srgb,
    list_corpus,
    quality_table,
    quant_error_map,
    read_raw,
    read_srgb,
    render,
    synth_raw,
    write_corpus,
    write_pgm,
    write_raw,
    write_srgb,
)
from schemas import CorpusConfig, IspConfig


class TestSynthRaw:
    @pytest.mark.parametrize("recipe", RECIPES)
    def test_range_and_shape(self, recipe):
        x = synth_raw(1, 64, 32, recipe)
        assert x.shape == (1, 3, 32, 64)
        assert x.dtype == np.float64
        assert x.min() >= 0.0 and x.max() <= 1.0

    @pytest.mark.parametrize("recipe", RECIPES)
    def test_deterministic(self, recipe):
        np.testing.assert_array_equal(synth_raw(4, 32, 32, recipe), synth_raw(4, 32, 32, recipe))

    def test_seed_changes_texture(self):
        assert not np.array_equal(synth_raw(1, 32, 32, "perlin_texture"), synth_raw(2, 32, 32, "perlin_texture"))

    def test_flat_has_no_variance(self):
        x = synth_raw(0, 64, 64, "flat")
        assert np.all(x.var(axis=(2, 3)) == 0)

    def test_gradient_spans_unit_range(self):
        x = synth_raw(0, 64, 32, "gradient")
        assert x.min() == 0.0 and x.max() == 1.0

    def test_composite_left_half_is_flat(self):
        x = synth_raw(3, 64, 64, "composite_halves")
        assert np.all(x[..., :32].var(axis=(2, 3)) == 0)
        assert np.all(x[..., 32:].var(axis=(2, 3)) > 0)

    def test_overexposed_clips(self):
        x = synth_raw(0, 64, 64, "overexposed_mix")
        assert np.any(x == 1.0)

    def test_unknown_recipe(self):
        with pytest.raises(ValueError):
            synth_raw(0, 32, 32, "checkerboard")

    def test_extents_must_be_multiples_of_32(self):
        with pytest.raises(ShapeError):
            synth_raw(0, 40, 32, "flat")


class TestIsp:
    def test_identity_is_rounding(self):
        x = np.random.default_rng(0).uniform(size=(1, 3, 8, 8))
        y = apply_isp(x, IspConfig.identity())
        np.testing.assert_array_equal(y, np.floor(255 * x + 0.5).astype(np.uint8))

    def test_mid_gray_through_gamma(self):
        x = np.full((1, 3, 2, 2), 0.18)
        assert np.all(apply_isp(x, IspConfig.identity(gamma=1 / 2.2)) == 117)

    def test_monotone_in_exposure(self):
        ramp = np.linspace(0.0, 1.0, 64)
        x = np.broadcast_to(ramp, (1, 3, 1, 64)).copy()
        y = apply_isp(x, IspConfig(gains=[1.0, 1.0, 1.0]))
        assert np.all(np.diff(y.astype(int), axis=-1) >= 0)

    def test_default_isp_clips_and_is_uint8(self):
        stages = render(synth_raw(0, 32, 32, "overexposed_mix"), IspConfig())
        assert stages.srgb.dtype == np.uint8
        assert stages.corrected.min() >= 0.0 and stages.corrected.max() <= 1.0

    def test_fewer_levels_coarsen_output(self):
        x = np.linspace(0, 1, 256).reshape(1, 1, 1, 256).repeat(3, axis=1)
        y = apply_isp(x, IspConfig(gains=[1, 1, 1], levels=16))
        assert len(np.unique(y)) <= 16


class TestQuantErrorMap:
    def test_unquantized_pipeline_loses_nothing(self):
        x = synth_raw(1, 32, 32, "perlin_texture")
        e = quant_error_map(x, IspConfig(quantize=False))
        assert e.shape == (1, 1, 32, 32)
        assert np.all(e == 0.0)

    def test_quantized_pipeline_loses_something(self):
        x = synth_raw(1, 32, 32, "perlin_texture")
        e = quant_error_map(x, IspConfig())
        assert np.all(e >= 0.0) and e.max() > 0.0

    def test_coarser_levels_lose_more(self):
        x = synth_raw(1, 32, 32, "gradient")
        fine = quant_error_map(x, IspConfig(levels=256)).mean()
        coarse = quant_error_map(x, IspConfig(levels=16)).mean()
        assert coarse > fine


class TestJpegSurrogate:
    def test_quality_100_keeps_a_constant_image(self):
        y = np.full((1, 3, 16, 16), 100, dtype=np.uint8)
        np.testing.assert_array_equal(degrade_srgb(y, 100), y)

    def test_lower_quality_is_worse(self):
        y = apply_isp(synth_raw(2, 64, 64, "perlin_texture"), IspConfig())
        ref = y.astype(float)
        mse10 = np.mean((degrade_srgb(y, 10).astype(float) - ref) ** 2)
        mse90 = np.mean((degrade_srgb(y, 90).astype(float) - ref) ** 2)
        assert mse10 > mse90

    def test_unaligned_extents_are_kept(self):
        y = np.random.default_rng(0).integers(0, 256, (1, 3, 13, 21), dtype=np.uint8)
        assert degrade_srgb(y, 50).shape == y.shape

    def test_quality_table_scaling(self):
        assert quality_table(50)[0, 0] == 16
        assert np.all(quality_table(100) == 1)
        with pytest.raises(ValueError):
            quality_table(0)


class TestImageIo:
    def test_raw_png_round_trip(self, tmp_path):
        x = synth_raw(5, 32, 32, "perlin_texture")
        write_raw(tmp_path / "a_raw.png", x)
        back = read_raw(tmp_path / "a_raw.png")
        assert np.max(np.abs(back - x)) <= 0.5 / RAW_MAX + 1e-12

    def test_srgb_png_keeps_channel_order(self, tmp_path):
        y = np.zeros((1, 3, 4, 4), dtype=np.uint8)
        y[0, 0], y[0, 1], y[0, 2] = 10, 20, 30
        write_srgb(tmp_path / "a.png", y)
        np.testing.assert_array_equal(read_srgb(tmp_path / "a.png"), y)

    def test_bit_depth_is_checked(self, tmp_path):
        write_srgb(tmp_path / "a.png", np.zeros((1, 3, 4, 4), dtype=np.uint8))
        with pytest.raises(ShapeError, match="bit depth"):
            read_raw(tmp_path / "a.png")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_srgb(tmp_path / "nope.png")

    def test_pgm_is_scaled_to_peak(self, tmp_path):
        m = np.array([[[[0.0, 0.5], [1.0, 2.0]]]])
        scale = write_pgm(tmp_path / "m.pgm", m)
        img = cv2.imread(str(tmp_path / "m.pgm"), cv2.IMREAD_UNCHANGED)
        assert scale == pytest.approx(RAW_MAX / 2.0)
        assert img.dtype == np.uint16 and img.max() == RAW_MAX and img[0, 0] == 0


class TestCorpus:
    def test_write_then_list(self, tmp_path):
        cfg = CorpusConfig(count=3, width=32, height=32, recipes=["flat", "gradient"], seed=9)
        written = write_corpus(tmp_path, cfg, IspConfig())
        listed = list_corpus(tmp_path)
        assert [i.name for i in listed] == ["0000_flat", "0001_gradient", "0002_flat"]
        assert [i.name for i in written] == [i.name for i in listed]
        assert (tmp_path / "manifest.csv").exists()
        x, y = listed[1].load()
        assert x.shape == y.shape == (1, 3, 32, 32)

    def test_corpus_is_reproducible(self, tmp_path):
        cfg = CorpusConfig(count=2, width=32, height=32, seed=1)
        write_corpus(tmp_path / "a", cfg, IspConfig())
        write_corpus(tmp_path / "b", cfg, IspConfig())
        for a, b in zip(list_corpus(tmp_path / "a"), list_corpus(tmp_path / "b")):
            np.testing.assert_array_equal(a.load()[0], b.load()[0])

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CorpusError):
            list_corpus(tmp_path / "absent")

    def test_empty_directory(self, tmp_path):
        with pytest.raises(CorpusError) as info:
            list_corpus(tmp_path)
        assert info.value.exit_code == EXIT_USAGE
