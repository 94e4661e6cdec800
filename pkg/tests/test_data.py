"""Data pipeline: procedural images, rain overlay, histograms, PNG, crops."""

import numpy as np
import pytest
from PIL import Image

from elf_derain import ops
from elf_derain.data import (
    RainParams,
    SamplePair,
    add_rain,
    crop_patches,
    hist_correlation,
    hwc_to_nchw,
    load_dataset,
    load_png,
    nchw_to_hwc,
    rain_layer,
    save_png,
    synth_clean,
    write_dataset,
    y_histogram,
)
from elf_derain.tensor import EngineError, Tensor


class TestSynthClean:
    def test_ramp_corners(self):
        img = synth_clean("ramp", 16, seed=0)
        assert img.shape == (16, 16, 3)
        assert img[0, 0, 0] == 0.0
        assert abs(img[15, 15, 0] - 1.0) < 1e-6

    def test_determinism(self):
        a = synth_clean("blobs", 32, seed=5)
        b = synth_clean("blobs", 32, seed=5)
        assert np.array_equal(a, b)
        c = synth_clean("blobs", 32, seed=6)
        assert not np.array_equal(a, c)

    def test_checker_mean_near_half(self):
        for seed in range(5):
            img = synth_clean("checker", 64, seed=seed)
            assert abs(img.mean() - 0.5) < 0.02

    def test_bad_size_raises(self):
        with pytest.raises(EngineError):
            synth_clean("ramp", 17, seed=0)
        with pytest.raises(EngineError):
            synth_clean("vortex", 16, seed=0)

    def test_values_in_range(self):
        for kind in ("ramp", "checker", "blobs", "mixed"):
            img = synth_clean(kind, 32, seed=1)
            assert img.min() >= 0.0 and img.max() <= 1.0


class TestAddRain:
    def test_zero_streaks_identity(self):
        clean = synth_clean("blobs", 32, seed=0)
        pair = add_rain(clean, RainParams(streak_density=0.0, rng_seed=1))
        assert np.array_equal(pair.rainy, pair.clean)

    def test_rain_never_darkens(self):
        clean = synth_clean("mixed", 64, seed=2)
        pair = add_rain(clean, RainParams(rng_seed=3))
        assert (pair.rainy - pair.clean).min() >= -1e-6

    def test_layer_deterministic_per_seed(self):
        a = rain_layer(32, 32, RainParams(rng_seed=9))
        b = rain_layer(32, 32, RainParams(rng_seed=9))
        assert np.array_equal(a, b)

    def test_monte_carlo_brightening_oracle(self):
        # expected added mass per pixel = count * E[length] * E[width] * E[intensity] / npix
        rp = RainParams(streak_density=3000.0, angle_deg=(70, 110),
                        length_px=(8, 16), width_px=(1.0, 2.0),
                        intensity=(0.1, 0.3))
        size = 64
        count = round(rp.streak_density * size * size / 1e6)
        expected = count * 12.0 * 1.5 * 0.2 / (size * size)
        clean = np.full((size, size, 3), 0.3, dtype=np.float32)
        deltas = []
        for seed in range(100):
            pair = add_rain(clean, RainParams(streak_density=3000.0,
                                              angle_deg=(70, 110),
                                              length_px=(8, 16),
                                              width_px=(1.0, 2.0),
                                              intensity=(0.1, 0.3),
                                              rng_seed=seed))
            deltas.append(pair.rainy.mean() - pair.clean.mean())
        measured = float(np.mean(deltas))
        assert abs(measured - expected) / expected < 0.30

    def test_invalid_params(self):
        with pytest.raises(EngineError):
            RainParams(intensity=(0.0, 0.5))
        with pytest.raises(EngineError):
            RainParams(length_px=(10, 5))


class TestHistogram:
    def test_constant_gray_single_bin(self):
        img = np.full((8, 8, 3), 0.5)
        h = y_histogram(img)
        assert h.max() == 1.0
        assert h.sum() == 1.0

    def test_normalized(self):
        img = synth_clean("mixed", 32, seed=3)
        h = y_histogram(img)
        assert abs(h.sum() - 1.0) < 1e-9
        assert h.shape == (256,)

    def test_correlation_identical(self):
        h = y_histogram(synth_clean("blobs", 32, seed=4))
        assert abs(hist_correlation(h, h) - 1.0) < 1e-12

    def test_correlation_anticorrelated(self):
        h1 = np.arange(1.0, 9.0)
        h2 = h1[::-1].copy()
        assert hist_correlation(h1, h2) < 0

    def test_two_bin_degenerate_is_one(self):
        # two points are always perfectly correlated; acceptance checks
        # therefore require >= 3 bins
        assert abs(hist_correlation([0.7, 0.3], [0.6, 0.4]) - 1.0) < 1e-12

    def test_zero_variance_raises(self):
        with pytest.raises(EngineError):
            hist_correlation([0.5, 0.5], [0.3, 0.7])

    def test_bin_count_mismatch_raises(self):
        with pytest.raises(EngineError):
            hist_correlation(np.ones(4) / 4, np.ones(8) / 8)

    def test_downup_preserves_statistics(self):
        corrs = []
        for seed in range(6):
            clean = synth_clean("blobs", 128, seed=seed)
            pair = add_rain(clean, RainParams(streak_density=2500.0,
                                              intensity=(0.15, 0.5),
                                              rng_seed=seed + 50))
            x = Tensor(hwc_to_nchw(pair.rainy))
            recon = ops.bilinear_resize(ops.bilinear_resize(x, scale=0.5), scale=2.0)
            corrs.append(hist_correlation(y_histogram(pair.rainy),
                                          y_histogram(nchw_to_hwc(recon.data))))
        assert np.mean(corrs) >= 0.9


class TestPngIO:
    def test_roundtrip_quantization_bound(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        p = tmp_path / "img.png"
        save_png(img, p)
        loaded = load_png(p)
        assert np.abs(loaded - img).max() <= 1.0 / 510 + 1e-7

    def test_second_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        save_png(img, p1)
        first = load_png(p1)
        save_png(first, p2)
        second = load_png(p2)
        assert np.array_equal(first, second)

    def test_grayscale_loads_as_replicated_rgb(self, tmp_path):
        gray = (np.arange(64, dtype=np.uint8).reshape(8, 8) * 4)
        p = tmp_path / "gray.png"
        Image.fromarray(gray, mode="L").save(p)
        loaded = load_png(p)
        assert loaded.shape == (8, 8, 3)
        assert np.array_equal(loaded[:, :, 0], loaded[:, :, 1])
        assert np.array_equal(loaded[:, :, 0], loaded[:, :, 2])

    def test_unreadable_raises_with_path(self, tmp_path):
        bad = tmp_path / "broken.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(EngineError, match="broken.png"):
            load_png(bad)


class TestCropPatches:
    def _pair(self, seed=0):
        clean = synth_clean("mixed", 64, seed=seed)
        return add_rain(clean, RainParams(rng_seed=seed), sample_id="p")

    def test_full_size_patch_is_original(self):
        pair = self._pair()
        crops = crop_patches(pair, 64, 1, seed=1)
        assert np.array_equal(crops[0].rainy, pair.rainy)
        assert np.array_equal(crops[0].clean, pair.clean)

    def test_seeded_determinism(self):
        pair = self._pair()
        a = crop_patches(pair, 32, 4, seed=2)
        b = crop_patches(pair, 32, 4, seed=2)
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.rainy, cb.rainy)

    def test_windows_aligned(self):
        clean = synth_clean("blobs", 64, seed=3)
        pair = SamplePair("clean_only", clean.copy(), clean.copy())
        for crop in crop_patches(pair, 32, 6, seed=4):
            assert np.array_equal(crop.rainy, crop.clean)

    def test_patch_too_large_raises(self):
        with pytest.raises(EngineError):
            crop_patches(self._pair(), 128, 1, seed=0)


class TestDatasetIO:
    def test_manifest_roundtrip(self, tmp_path):
        pairs = [add_rain(synth_clean("blobs", 32, seed=s),
                          RainParams(rng_seed=s), sample_id=f"s{s}")
                 for s in range(3)]
        manifest = write_dataset(pairs, tmp_path / "ds")
        lines = manifest.read_text().strip().split("\n")
        assert len(lines) == 3
        assert all(len(line.split("\t")) == 3 for line in lines)
        loaded = load_dataset(tmp_path / "ds")
        assert [p.sample_id for p in loaded] == ["s0", "s1", "s2"]

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(EngineError, match="manifest"):
            load_dataset(tmp_path)
