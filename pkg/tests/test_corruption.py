import numpy as np
import pytest

from ldae.corruption import (
    CorruptionConfig,
    corrupt_image,
    corrupt_latent,
    corrupt_pixels,
    export_panels,
    latent_to_image,
    triptych,
)
from ldae.image import read_ppm
from ldae.patches import PatchSample, extract_patches
from ldae.rng import child_rng
from ldae.schedule import NoiseSchedule
from ldae.tokenizer import decode, encode, fit_pca

DDPM = NoiseSchedule(kind="ddpm_linear_beta")
FIXED = NoiseSchedule(kind="fixed_gamma")


def make_basis(seed: int, d: int = 6):
    x = child_rng(seed, "pat").normal(size=(2048, 12))
    sample = PatchSample(patches=x, patch_size=2, source_images=1)
    return fit_pca(sample, d)


def make_image(seed: int, size: int = 8) -> np.ndarray:
    return child_rng(seed, "img").uniform(-1.0, 1.0, size=(size, size, 3))


class TestConfig:
    def test_space_flags(self):
        basis = make_basis(0)
        lat = CorruptionConfig(basis, DDPM, "latent_in_latent_out")
        img_lat = CorruptionConfig(basis, DDPM, "image_in_latent_out")
        img_img = CorruptionConfig(basis, DDPM, "image_in_image_out")
        assert not lat.image_input and not lat.image_output
        assert img_lat.image_input and not img_lat.image_output
        assert img_img.image_input and img_img.image_output

    def test_unknown_space(self):
        with pytest.raises(ValueError):
            CorruptionConfig(make_basis(1), DDPM, "pixel_in_pixel_out")


class TestCorruptLatent:
    def test_matches_diffuse(self):
        z0 = child_rng(2, "z").normal(size=(3, 4, 6))
        a = corrupt_latent(z0, FIXED, 100, child_rng(3, "e"))
        b = corrupt_latent(z0, FIXED, 100, child_rng(3, "e"))
        np.testing.assert_array_equal(a.z_t, b.z_t)
        np.testing.assert_array_equal(a.z_t, a.gamma * z0 + a.sigma * a.eps)


class TestLatentToImage:
    def test_dropped_complement_is_pure_decode(self):
        basis = make_basis(4)
        cfg = CorruptionConfig(basis, DDPM, "image_in_image_out")
        z = child_rng(5, "z").normal(size=(7, 6))
        np.testing.assert_array_equal(latent_to_image(cfg, z), decode(basis, z))

    def test_kept_complement_restores_original(self):
        basis = make_basis(6)
        cfg = CorruptionConfig(
            basis, DDPM, "image_in_image_out", drop_orthogonal_complement=False
        )
        x = child_rng(7, "x").normal(size=(7, 12))
        out = latent_to_image(cfg, encode(basis, x), x)
        np.testing.assert_allclose(out, x, atol=1e-10)

    def test_kept_complement_requires_source(self):
        basis = make_basis(8)
        cfg = CorruptionConfig(
            basis, DDPM, "image_in_image_out", drop_orthogonal_complement=False
        )
        with pytest.raises(ValueError):
            latent_to_image(cfg, np.zeros((3, 6)))


class TestCorruptImage:
    def test_t_zero_keeps_spanned_content(self):
        # at t = 0 on a variance-preserving schedule the latent is clean,
        # so with the complement kept the image survives exactly
        basis = make_basis(9)
        cfg = CorruptionConfig(
            basis, DDPM, "image_in_image_out", drop_orthogonal_complement=False
        )
        img = make_image(10)
        noisy, draw = corrupt_image(img, cfg, 0, child_rng(11, "e"))
        np.testing.assert_allclose(noisy, img, atol=1e-10)
        np.testing.assert_array_equal(draw.z_t, draw.z0)

    def test_t_zero_dropped_complement_projects(self):
        basis = make_basis(12)
        cfg = CorruptionConfig(basis, DDPM, "image_in_image_out")
        img = make_image(13)
        noisy, _ = corrupt_image(img, cfg, 0, child_rng(14, "e"))
        pat = extract_patches(img, 2)
        expect = decode(basis, encode(basis, pat))
        np.testing.assert_allclose(extract_patches(noisy, 2), expect, atol=1e-12)

    def test_shape_and_determinism(self):
        basis = make_basis(15)
        cfg = CorruptionConfig(basis, FIXED, "latent_in_latent_out")
        img = make_image(16)
        a, _ = corrupt_image(img, cfg, 500, child_rng(17, "e"))
        b, _ = corrupt_image(img, cfg, 500, child_rng(17, "e"))
        assert a.shape == img.shape
        np.testing.assert_array_equal(a, b)

    def test_corruption_grows_with_t(self):
        basis = make_basis(18)
        cfg = CorruptionConfig(basis, FIXED, "image_in_image_out")
        img = make_image(19)
        lo, _ = corrupt_image(img, cfg, 50, child_rng(20, "e"))
        hi, _ = corrupt_image(img, cfg, 1000, child_rng(20, "e"))
        assert np.mean((hi - img) ** 2) > np.mean((lo - img) ** 2)


class TestCorruptPixels:
    def test_matches_direct_diffusion(self):
        img = make_image(21)
        out = corrupt_pixels(img, FIXED, 300, child_rng(22, "e"))
        draw = corrupt_latent(img, FIXED, 300, child_rng(22, "e"))
        np.testing.assert_array_equal(out, draw.z_t)


class TestTriptych:
    def test_geometry_and_gutter(self):
        a = np.zeros((4, 3, 3))
        b = np.ones((4, 5, 3)) * -1.0
        strip = triptych([a, b], gutter=2)
        assert strip.shape == (4, 3 + 2 + 5, 3)
        np.testing.assert_array_equal(strip[:, 3:5], 1.0)  # white gutter
        np.testing.assert_array_equal(strip[:, :3], a)
        np.testing.assert_array_equal(strip[:, 5:], b)

    def test_single_panel_no_gutter(self):
        a = make_image(23)
        np.testing.assert_array_equal(triptych([a]), a)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            triptych([])

    def test_height_mismatch_rejected(self):
        with pytest.raises(ValueError):
            triptych([np.zeros((4, 4, 3)), np.zeros((5, 4, 3))])


class TestExportPanels:
    def test_writes_clamped_strip(self, tmp_path):
        a = np.full((2, 2, 3), 2.0)   # clamps to 1.0 -> 255
        b = np.full((2, 2, 3), -2.0)  # clamps to -1.0 -> 0
        path = tmp_path / "strip.ppm"
        export_panels(path, [a, b], gutter=1)
        raw = read_ppm(path)
        assert raw.shape == (2, 5, 3)
        assert raw[:, :2].min() == 255
        assert raw[:, 3:].max() == 0
