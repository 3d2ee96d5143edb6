import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepbcr import tileproc as tp


def random_image(seed, h=12, w=9):
    return tp.RasterImage(np.random.default_rng(seed).integers(0, 256, size=(h, w, 3)).astype(np.uint8))


class TestColor:
    def test_saturation_example(self):
        assert tp.hsv_saturation(np.array([200, 120, 160])) == pytest.approx(0.4)

    def test_roundtrip(self):
        rgb = np.random.default_rng(0).uniform(1, 255, size=(50, 3))
        np.testing.assert_allclose(tp.lab_to_rgb(tp.rgb_to_lab(rgb)), rgb, atol=1e-9)

    def test_achromatic_has_zero_chroma(self):
        # equal RGB gives equal-ish LMS; alpha and beta stay near zero
        lab = tp.rgb_to_lab(np.array([[128.0, 128.0, 128.0]]))
        assert abs(lab[0, 1]) < 0.01 and abs(lab[0, 2]) < 0.01

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), m=st.lists(st.floats(-3, 1), min_size=3, max_size=3),
           sd=st.lists(st.floats(0.01, 0.5), min_size=3, max_size=3))
    def test_reinhard_contract(self, seed, m, sd):
        img = random_image(seed)
        target = tp.LabStats(tuple(m), tuple(sd))
        out = tp.lab_stats(tp.reinhard_lab(img, target))
        np.testing.assert_allclose(out.mean, target.mean, atol=1e-9)
        np.testing.assert_allclose(out.std, target.std, atol=1e-9)

    def test_self_target_is_identity(self):
        img = random_image(3)
        lab = tp.rgb_to_lab(img.pixels)
        np.testing.assert_allclose(tp.reinhard_lab(img, tp.compute_lab_stats(img)), lab, atol=1e-12)
        out = tp.reinhard_normalize(img, tp.compute_lab_stats(img))
        assert np.abs(out.pixels.astype(int) - img.pixels.astype(int)).max() <= 1

    def test_constant_image_stats(self):
        img = tp.RasterImage(np.full((3, 3, 3), 128, dtype=np.uint8))
        np.testing.assert_allclose(tp.compute_lab_stats(img).std, 0.0, atol=1e-15)

    def test_two_pixel_mean(self):
        px = np.array([[[10, 200, 30], [250, 5, 90]]], dtype=np.uint8)
        lab = tp.rgb_to_lab(px.reshape(-1, 3))
        np.testing.assert_allclose(tp.compute_lab_stats(tp.RasterImage(px)).mean, (lab[0] + lab[1]) / 2, atol=1e-15)

    def test_constant_image_takes_target_mean(self):
        img = tp.RasterImage(np.full((4, 4, 3), 90, dtype=np.uint8))
        target = tp.LabStats((0.5, 0.01, -0.02), (0.3, 0.2, 0.1))
        out = tp.reinhard_lab(img, target)
        np.testing.assert_allclose(out.reshape(-1, 3), np.tile(target.mean, (16, 1)), atol=1e-12)

    def test_flat_channel_guard(self):
        img = tp.RasterImage(np.full((4, 4, 3), 90, dtype=np.uint8))
        out = tp.reinhard_lab(img, tp.LabStats((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)))
        assert np.isfinite(out).all()

    def test_stats_json(self, tmp_path):
        s = tp.LabStats((1.0, 2.0, 3.0), (0.1, 0.2, 0.3))
        tp.save_lab_stats(tmp_path / "t.json", s)
        assert tp.load_lab_stats(tmp_path / "t.json") == s
        with pytest.raises(ValueError):
            tp.LabStats.from_json({"mean": [0, 0, 0], "std": [-1, 0, 0]})


class TestTissue:
    def test_mask_separates_tissue(self):
        px = np.full((64, 64, 3), 240, dtype=np.uint8)
        px[:, :32] = (200, 120, 160)
        mask = tp.tissue_mask(tp.RasterImage(px), downsample_factor=8)
        assert mask.shape == (8, 8)
        assert mask[:, :4].all() and not mask[:, 4:].any()

    def test_white_is_background(self):
        mask = tp.tissue_mask(tp.RasterImage(np.full((32, 32, 3), 255, dtype=np.uint8)))
        assert not mask.any()
        assert tp.hsv_saturation(np.array([245, 245, 245])) == 0.0

    def test_downsample_ceil(self):
        assert tp.downsample(np.ones((10, 17, 3)), 8).shape == (2, 3, 3)

    def test_grid_example(self):
        g = tp.patch_grid(2048, 2048, tp.TileGridSpec(patch_size_px=896))
        assert len(g.coords) == 4 and not g.too_small

    def test_too_small_warns(self):
        with pytest.warns(UserWarning):
            g = tp.patch_grid(500, 2000, tp.TileGridSpec())
        assert g.too_small and g.coords == []

    def test_grid_respects_mask(self):
        mask = np.zeros((4, 4), bool)
        mask[:2, :2] = True
        g = tp.patch_grid(64, 64, tp.TileGridSpec(patch_size_px=32), mask, mask_downsample=16)
        assert g.coords == [(0, 0)]

    @settings(max_examples=40, deadline=None)
    @given(w=st.integers(1, 300), h=st.integers(1, 300), size=st.integers(8, 64))
    def test_patches_inside_image(self, w, h, size):
        spec = tp.TileGridSpec(patch_size_px=size)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            g = tp.patch_grid(w, h, spec)
        for c, r in g.coords:
            assert (c + 1) * size <= w and (r + 1) * size <= h
        assert len(g.coords) == (w // size) * (h // size)

    def test_crop(self):
        img = random_image(0, 20, 20)
        p = tp.crop_patch(img, 1, 0, tp.TileGridSpec(patch_size_px=8))
        np.testing.assert_array_equal(p.pixels, img.pixels[0:8, 8:16])


class TestNetpbm:
    def test_ppm_roundtrip(self, tmp_path):
        img = random_image(1, 5, 7)
        tp.write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(tp.read_ppm(tmp_path / "a.ppm").pixels, img.pixels)

    def test_pgm_with_comment(self, tmp_path):
        body = np.arange(6, dtype=np.uint8)
        (tmp_path / "g.pgm").write_bytes(b"P5\n# made by hand\n3 2\n255\n" + body.tobytes())
        np.testing.assert_array_equal(tp.read_pgm(tmp_path / "g.pgm"), body.reshape(2, 3))

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ValueError):
            tp.read_ppm(tmp_path / "x.ppm")
