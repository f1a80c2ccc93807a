import numpy as np
import pytest

from modalmix.codec import (
    BASE_CODEC,
    TOY_CODEC,
    CodecConfig,
    CodecError,
    decode,
    encode,
    from_color,
    to_color,
)
from modalmix.scenes import DatasetConfig, render, sample_scene


class TestCodecConfig:
    @pytest.mark.parametrize("config, channels", [(TOY_CODEC, 96), (BASE_CODEC, 768)])
    def test_channels(self, config, channels):
        assert config.channels == channels

    def test_latent_shape(self):
        assert TOY_CODEC.latent_shape(8, 32, 32) == (4, 8, 8, 96)

    def test_rejects_indivisible_dims(self):
        with pytest.raises(CodecError, match="height"):
            TOY_CODEC.latent_shape(8, 30, 32)

    def test_rejects_zero_factor(self):
        with pytest.raises(CodecError):
            CodecConfig(ft=0)


class TestEncode:
    def test_pixel_lands_in_documented_channel(self):
        video = np.zeros((8, 32, 32, 3), dtype=np.float32)
        t, y, x, c = 5, 10, 7, 2
        video[t, y, x, c] = 1.0
        latent = encode(video, TOY_CODEC)
        channel = c * 32 + (t % 2) * 16 + (y % 4) * 4 + (x % 4)
        assert latent[t // 2, y // 4, x // 4, channel] == 1.0
        assert (latent == 1.0).sum() == 1
        assert latent.min() == -1.0

    @pytest.mark.parametrize("config", [TOY_CODEC, BASE_CODEC])
    def test_roundtrip_is_exact(self, config):
        rng = np.random.default_rng(0)
        for _ in range(100):
            video = rng.random((8, 32, 32, 3), dtype=np.float32)
            back = decode(encode(video, config), config)
            assert back.dtype == np.float32
            assert np.array_equal(back, video)

    @pytest.mark.parametrize("levels", [255, 65535])
    def test_roundtrip_is_exact_on_storage_grid(self, levels):
        rng = np.random.default_rng(levels)
        steps = rng.integers(0, levels + 1, size=(2, 4, 4, 3))
        steps[0, 0, 0] = (0, 1, levels)
        video = steps.astype(np.float32) / np.float32(levels)
        assert np.array_equal(decode(encode(video, TOY_CODEC), TOY_CODEC), video)

    def test_is_affine(self):
        rng = np.random.default_rng(1)
        a = rng.random((2, 4, 4, 3))
        b = rng.random((2, 4, 4, 3))
        alpha, beta = 0.25, 0.5
        lhs = encode(alpha * a + beta * b, TOY_CODEC)
        rhs = alpha * (encode(a, TOY_CODEC) + 1) + beta * (encode(b, TOY_CODEC) + 1) - 1
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_decode_rejects_wrong_channels(self):
        with pytest.raises(CodecError):
            decode(np.zeros((1, 1, 1, 95)), TOY_CODEC)


class TestColorMaps:
    @pytest.mark.parametrize("modality", ["rgb", "depth", "seg", "edges"])
    def test_rendered_planes_roundtrip(self, modality):
        video = render(sample_scene(2, DatasetConfig()))
        plane = getattr(video, modality)
        latent = encode(to_color(plane, modality), TOY_CODEC)
        back = from_color(decode(latent, TOY_CODEC), modality)
        assert back.dtype == plane.dtype
        assert np.array_equal(back, plane)

    def test_seg_snaps_to_nearest_palette_color(self):
        noisy = np.full((1, 1, 1, 3), 0.1, dtype=np.float32)
        noisy[..., 0] = 0.8
        assert from_color(noisy, "seg").tolist() == [[[1]]]

    def test_seg_rejects_unknown_ids(self):
        with pytest.raises(CodecError):
            to_color(np.full((1, 2, 2), 9, dtype=np.uint8), "seg")

    def test_edges_threshold(self):
        video = np.full((1, 1, 2, 3), 0.4, dtype=np.float32)
        video[0, 0, 1] = 0.6
        assert from_color(video, "edges").tolist() == [[[False, True]]]
