import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowar.tokenizer import (
    ChannelNormalizer,
    LatentCodec,
    LearnedPatchCodec,
    PatchCodec,
    make_codec,
    patchify,
    unpatchify,
)


@pytest.fixture(params=["identity", "orthogonal"])
def codec(request):
    return PatchCodec(patch_size=4, basis=request.param, seed=3)


class TestPatchCodec:
    def test_shapes(self, codec, rng):
        img = rng.random((3, 16, 16))
        z = codec.encode(img)
        assert z.shape == (48, 4, 4)
        assert codec.decode(z).shape == (3, 16, 16)
        assert codec.encode(rng.random((5, 3, 16, 16))).shape == (5, 48, 4, 4)

    def test_roundtrip_is_exact_enough(self, codec, rng):
        img = rng.random((2, 3, 32, 32))
        assert np.abs(codec.decode(codec.encode(img)) - img).max() < 1e-5

    def test_zero_in_zero_out(self, codec):
        assert np.all(codec.encode(np.zeros((3, 8, 8))) == 0)
        assert np.all(codec.decode(np.zeros((48, 2, 2))) == 0)

    def test_identity_packing_order(self):
        img = np.arange(3 * 4 * 4, dtype=np.float64).reshape(3, 4, 4)
        z = PatchCodec(4).encode(img)
        # channel-major, then patch row, then patch column
        np.testing.assert_array_equal(z[:, 0, 0], img.reshape(-1))

    def test_non_divisible_size_rejected(self, codec):
        with pytest.raises(ValueError, match="divisible"):
            codec.encode(np.zeros((3, 10, 10)))

    @pytest.mark.parametrize("p", [0, 3, 6])
    def test_ratio_must_be_power_of_two(self, p):
        with pytest.raises(ValueError, match="power of two"):
            PatchCodec(p)

    def test_satisfies_protocol(self, codec):
        assert isinstance(codec, LatentCodec)
        assert isinstance(LearnedPatchCodec(2, 8), LatentCodec)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_patchify_roundtrip(p, blocks, seed):
    img = np.random.default_rng(seed).random((2, 3, p * blocks, p * blocks))
    np.testing.assert_array_equal(unpatchify(patchify(img, p), p), img)


class TestLearnedCodec:
    def test_fit_reduces_reconstruction_error(self, rng):
        images = rng.random((16, 3, 8, 8))
        codec = LearnedPatchCodec(patch_size=2, channels=8, seed=0)
        history = codec.fit(images, steps=150, lr=1e-2)
        assert history[-1] < 0.5 * history[0]
        z = codec.encode(images)
        assert z.shape == (16, 8, 4, 4)
        assert codec.decode(z).shape == images.shape

    def test_state_roundtrip(self, rng):
        a = LearnedPatchCodec(2, 6, seed=1)
        b = LearnedPatchCodec(2, 6, seed=2)
        b.load_state(a.state())
        img = rng.random((3, 4, 4))
        np.testing.assert_array_equal(a.encode(img), b.encode(img))

    def test_make_codec(self):
        assert make_codec("learned_patch", 2).latent_channels == 12
        assert make_codec("patch", 8).latent_channels == 192
        with pytest.raises(ValueError):
            make_codec("vq")


class TestNormalizer:
    def test_fit_standardizes_channels(self, rng):
        z = rng.standard_normal((64, 5, 3, 3)) * np.arange(1, 6)[:, None, None] + 7
        norm = ChannelNormalizer.fit(z)
        y = norm.normalize(z)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=(0, 2, 3)), 1, rtol=1e-12)
        np.testing.assert_allclose(norm.denormalize(y), z, rtol=1e-12)

    def test_constant_channel_does_not_divide_by_zero(self):
        z = np.zeros((4, 2, 2, 2))
        assert np.all(np.isfinite(ChannelNormalizer.fit(z).normalize(z)))
