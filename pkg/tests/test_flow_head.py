import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowar import numerics as nx
from flowar.flow_head import (
    GRANULARITIES,
    INJECTION_MODES,
    FlowBlock,
    FlowConfig,
    FlowHead,
    cosine_alpha_sigma,
    ddim_step,
    diffuse,
    fm_loss,
    interpolate,
    noised_input_and_target,
    velocity_target,
)
from flowar.numerics import Tensor
from flowar.numerics.gradcheck import check_gradients

from conftest import randomize

C, CW = 6, 16


def make_head(seed=0, **kw):
    cfg = FlowConfig(**{"depth": 2, "width": 16, "heads": 2, "latent_channels": C, "cond_width": CW,
                        "freq_dim": 8, **kw})
    return FlowHead(cfg, np.random.default_rng(seed), np.float64)


def sem(rng, b, n):
    return Tensor(rng.standard_normal((b, n, CW)))


class TestInterpolant:
    def test_examples(self):
        s, f0 = np.array([2.0]), np.array([0.0])
        np.testing.assert_array_equal(interpolate(s, f0, 0.0), f0)
        np.testing.assert_array_equal(interpolate(s, f0, 1.0), s)
        np.testing.assert_array_equal(interpolate(s, f0, 0.5), [1.0])
        np.testing.assert_array_equal(velocity_target(np.array([3.0]), np.array([1.0])), [2.0])
        np.testing.assert_array_equal(velocity_target(s, s), [0.0])

    @pytest.mark.parametrize("t", [-0.1, 1.5, np.nan])
    def test_time_outside_unit_interval(self, t):
        with pytest.raises(ValueError, match="time"):
            interpolate(np.ones(2), np.zeros(2), t)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 2**31 - 1))
    def test_identity(self, t, seed):
        rng = np.random.default_rng(seed)
        s, f0 = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
        recon = interpolate(s, f0, t) + (1 - t) * velocity_target(s, f0)
        np.testing.assert_allclose(recon, s, atol=1e-12, rtol=0)

    def test_per_sample_times_broadcast(self, rng):
        s, f0 = rng.standard_normal((3, 2, 2, 2)), rng.standard_normal((3, 2, 2, 2))
        t = np.array([0.0, 0.5, 1.0])
        out = interpolate(s, f0, t)
        np.testing.assert_array_equal(out[0], f0[0])
        np.testing.assert_array_equal(out[2], s[2])


class TestDiffusionVariant:
    def test_endpoint_is_pure_noise(self, rng):
        s, eps = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        np.testing.assert_array_equal(diffuse(s, eps, 1.0), eps)
        np.testing.assert_array_equal(diffuse(s, eps, 0.0), s)
        a, sg = cosine_alpha_sigma(np.linspace(0, 1, 11))
        np.testing.assert_allclose(a * a + sg * sg, 1.0, rtol=1e-15)

    def test_epsilon_target_is_the_noise(self, rng):
        s, eps = rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 3, 2, 2))
        _, target = noised_input_and_target(s, eps, np.array([0.2, 0.9]), "diffusion_epsilon")
        np.testing.assert_array_equal(target, eps)

    def test_ddim_with_true_noise_lands_on_the_path(self, rng):
        s, eps = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        x = diffuse(s, eps, 0.7)
        np.testing.assert_allclose(ddim_step(x, eps, 0.7, 0.3), diffuse(s, eps, 0.3), atol=1e-12)
        np.testing.assert_allclose(ddim_step(x, eps, 0.7, 0.0), s, atol=1e-12)

    def test_ddim_first_step_is_bounded(self, rng):
        eps = rng.standard_normal((4, 3))
        out = ddim_step(eps, 0.5 * eps, 1.0, 0.96)
        assert np.all(np.isfinite(out)) and np.abs(out).max() < 6


class TestHeadStructure:
    @pytest.mark.parametrize("size", [1, 2, 4, 8, 16])
    def test_output_shape_matches_input(self, size, rng):
        head = make_head()
        x = rng.standard_normal((2, C, size, size))
        assert head(x, sem(rng, 2, size * size), np.array([0.1, 0.9])).shape == x.shape

    def test_zero_output_at_init(self, rng):
        head = make_head()
        out = head(rng.standard_normal((2, C, 2, 2)), sem(rng, 2, 4), 0.3)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_block_is_identity_at_init(self, rng):
        blk = FlowBlock(16, 2, 4.0, CW, rng, np.float64)
        x = Tensor(rng.standard_normal((2, 5, 16)))
        np.testing.assert_array_equal(blk(x, sem(rng, 2, 5)).data, x.data)

    def test_semantics_shape_mismatch(self, rng):
        with pytest.raises(ValueError, match="semantics"):
            make_head()(rng.standard_normal((2, C, 2, 2)), sem(rng, 2, 3), 0.5)

    def test_seq_concat_doubles_sequence(self, rng):
        lengths = {}
        for mode in ("seq_concat", "spatial_adaln"):
            head = make_head(injection_mode=mode)
            head(rng.standard_normal((1, C, 4, 4)), sem(rng, 1, 16), 0.5)
            lengths[mode] = head.last_seq_len
        assert lengths == {"seq_concat": 32, "spatial_adaln": 16}

    def test_modulation_varies_per_position(self, rng):
        head = make_head()
        randomize(head, rng)
        blk = head.blocks[0]
        params = blk.modulation_params(head.condition(sem(rng, 1, 4), np.array([0.4])))
        assert len(params) == 6
        for p in params:
            assert p.shape == (1, 4, 16)
            assert np.abs(p.data[0, 0] - p.data[0, 1]).max() > 1e-6

    def test_spatial_adaln_reduces_to_adaln_on_constant_semantics(self, rng):
        spatial = make_head(injection_mode="spatial_adaln")
        randomize(spatial, rng)
        plain = make_head(injection_mode="adaln")
        plain.load_state_dict(spatial.state_dict())
        const = Tensor(np.broadcast_to(rng.standard_normal((2, 1, CW)), (2, 9, CW)).copy())
        x, t = rng.standard_normal((2, C, 3, 3)), np.array([0.2, 0.7])
        assert np.abs(spatial(x, const, t).data - plain(x, const, t).data).max() < 1e-6


class TestGranularity:
    def test_per_token_commutes_with_permutation(self, rng):
        head = make_head(granularity="per_token")
        randomize(head, rng)
        x = rng.standard_normal((1, 9, C))
        s = rng.standard_normal((1, 9, CW))
        perm = rng.permutation(9)
        out = head.forward_tokens(Tensor(x), Tensor(s), 0.5).data
        out_p = head.forward_tokens(Tensor(x[:, perm]), Tensor(s[:, perm]), 0.5).data
        np.testing.assert_allclose(out[:, perm], out_p, atol=1e-12)

    @pytest.mark.parametrize("mode", INJECTION_MODES)
    def test_per_token_has_no_cross_token_influence(self, mode, rng):
        head = make_head(granularity="per_token", injection_mode=mode)
        randomize(head, rng)
        x = rng.standard_normal((1, C, 2, 2))
        s = sem(rng, 1, 4)
        base = head(x, s, 0.5).data
        x2 = x.copy()
        x2[0, :, 1, 1] += 1.0  # token 3
        moved = head(x2, s, 0.5).data
        np.testing.assert_array_equal(moved[0, :, 0, :], base[0, :, 0, :])
        np.testing.assert_array_equal(moved[0, :, 1, 0], base[0, :, 1, 0])
        assert np.abs(moved[0, :, 1, 1] - base[0, :, 1, 1]).max() > 0

    def test_per_scale_mixes_tokens(self, rng):
        head = make_head(granularity="per_scale")
        randomize(head, rng)
        x = rng.standard_normal((1, C, 2, 2))
        s = sem(rng, 1, 4)
        x2 = x.copy()
        x2[0, :, 1, 1] += 1.0
        assert np.abs(head(x2, s, 0.5).data[0, :, 0, 0] - head(x, s, 0.5).data[0, :, 0, 0]).max() > 1e-8


@pytest.mark.parametrize("mode", INJECTION_MODES)
@pytest.mark.parametrize("granularity", GRANULARITIES)
def test_gradients_every_mode(mode, granularity, rng):
    head = make_head(injection_mode=mode, granularity=granularity)
    randomize(head, rng)
    x = rng.standard_normal((2, C, 2, 2))
    s = Tensor(rng.standard_normal((2, 4, CW)), requires_grad=True)
    target = rng.standard_normal((2, C, 2, 2))
    params = [s] + head.parameters()
    err = check_gradients(lambda: nx.mse(head(x, s, np.array([0.3, 0.8])), target), params,
                          max_entries=4, rng=np.random.default_rng(0))
    assert err < 1e-5


class TestLoss:
    def _data(self, rng):
        scales = [rng.standard_normal((3, C, n, n)) for n in (1, 2, 4)]
        sems = [sem(rng, 3, n * n) for n in (1, 2, 4)]
        ts = [rng.random(3) for _ in scales]
        f0s = [rng.standard_normal(s.shape) for s in scales]
        return scales, sems, ts, f0s

    def test_perfect_predictor_scores_zero(self, rng):
        scales, sems, ts, f0s = self._data(rng)
        # every scale has a distinct shape, so the shape identifies the true velocity
        velocity = {s.shape: s - f for s, f in zip(scales, f0s)}
        oracle = lambda x, semantics, t: Tensor(velocity[x.shape])  # noqa: E731
        assert float(fm_loss(oracle, scales, sems, ts, f0s).data) == pytest.approx(0.0, abs=1e-12)

    def test_zero_predictor_closed_form(self, rng):
        scales, sems, ts, f0s = self._data(rng)
        zero = lambda x, semantics, t: Tensor(np.zeros_like(x))  # noqa: E731
        expected = sum(np.mean((s - f) ** 2) for s, f in zip(scales, f0s))
        assert float(fm_loss(zero, scales, sems, ts, f0s).data) == pytest.approx(expected, rel=1e-12)
        total = sum(np.sum((s - f) ** 2) for s, f in zip(scales, f0s))
        assert float(fm_loss(zero, scales, sems, ts, f0s, reduction="sum").data) == pytest.approx(total, rel=1e-12)

    def test_untrained_head_loss_equals_zero_predictor(self, rng):
        scales, sems, ts, f0s = self._data(rng)
        expected = sum(np.mean((s - f) ** 2) for s, f in zip(scales, f0s))
        assert abs(float(fm_loss(make_head(), scales, sems, ts, f0s).data) - expected) < 1e-6

    def test_diffusion_perfect_stub(self, rng):
        scales, sems, ts, f0s = self._data(rng)
        by_shape = {f.shape: f for f in f0s}
        stub = lambda x, semantics, t: Tensor(by_shape[x.shape])  # noqa: E731
        assert float(fm_loss(stub, scales, sems, ts, f0s, "diffusion_epsilon").data) == 0.0

    def test_non_negative(self, rng):
        head = make_head()
        randomize(head, rng)
        scales, sems, ts, f0s = self._data(rng)
        assert float(fm_loss(head, scales, sems, ts, f0s).data) >= 0.0


def test_config_rejects_unknown_enum():
    with pytest.raises(ValueError, match="injection_mode"):
        FlowConfig(injection_mode="film")
