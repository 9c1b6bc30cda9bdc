import numpy as np
import pytest

from geocausal.exceptions import ValidationError
from geocausal.fields import (
    FIELD_NAMES,
    MeanNetwork,
    draw_moments,
    field_posterior_mean_map,
    live_masks,
)
from geocausal.flows import identity_stack
from geocausal.grid import GridDataset, compute_active_masks
from geocausal.util import EXP_CLAMP, stream

from helpers import central_diff, make_field, rel_err


def small_grid(prior_ls, prior_lf, has_building, dpm):
    n = len(prior_ls)
    rng = np.random.default_rng(0)
    return GridDataset(
        ids=np.arange(n, dtype=np.int64),
        lon=rng.uniform(size=n),
        lat=rng.uniform(size=n),
        features=rng.normal(size=(n, 7)),
        prior_ls=np.asarray(prior_ls, dtype=float),
        prior_lf=np.asarray(prior_lf, dtype=float),
        has_building=np.asarray(has_building, dtype=bool),
        dpm=np.asarray(dpm, dtype=float),
    )


class TestMeanNetwork:
    def test_forward_shape_and_linearity_at_zero_weights(self):
        rng = np.random.default_rng(3)
        net = MeanNetwork.init(4, rng)
        x = rng.normal(size=(9, 4))
        out = net.forward(x)
        assert out.shape == (9,)
        net.w3 = np.zeros_like(net.w3)
        net.b3 = 1.25
        np.testing.assert_allclose(net.forward(x), 1.25)

    def test_forward_tape_matches_forward(self):
        rng = np.random.default_rng(4)
        net = MeanNetwork.init(3, rng)
        x = rng.normal(size=(6, 3))
        out, tape = net.forward_tape(x)
        np.testing.assert_allclose(out, net.forward(x))
        assert tape[0] is x

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        net = MeanNetwork.init(3, rng)
        x = rng.normal(size=(5, 3))
        cot = rng.normal(size=5)
        _, tape = net.forward_tape(x)
        grads = net.backward(tape, cot)

        names = ["w1", "b1", "w2", "b2", "w3", "b3"]
        for name in names:
            base = np.atleast_1d(np.asarray(getattr(net, name), dtype=float))
            shape = base.shape

            def f(flat, attr=name, shp=shape):
                saved = getattr(net, attr)
                val = flat.reshape(shp)
                setattr(net, attr, float(val[0]) if attr == "b3" else val)
                out = net.forward(x)
                setattr(net, attr, saved)
                return float(np.dot(cot, out))

            fd = central_diff(f, base.ravel(), h=1e-6)
            got = np.atleast_1d(grads["nn_" + name]).ravel()
            assert rel_err(got, fd, floor=1e-6) < 5e-5, name


class TestDrawMoments:
    def test_seed_is_deterministic(self):
        rng = np.random.default_rng(11)
        field = make_field(rng, n_inducing=5, in_dim=3, rank=2, depth=2)
        x = rng.normal(size=(8, 3))
        a = draw_moments(field, x, 16, seed=99)
        b = draw_moments(field, x, 16, seed=99)
        np.testing.assert_array_equal(a.draws, b.draws)
        np.testing.assert_array_equal(a.mean, b.mean)
        c = draw_moments(field, x, 16, seed=100)
        assert not np.array_equal(a.draws, c.draws)

    def test_exactly_one_noise_source(self):
        rng = np.random.default_rng(12)
        field = make_field(rng)
        x = rng.normal(size=(4, 3))
        with pytest.raises(ValidationError):
            draw_moments(field, x, 8)
        with pytest.raises(ValidationError):
            draw_moments(field, x, 8, seed=1, noise=np.zeros((4, 8)))
        with pytest.raises(ValidationError):
            draw_moments(field, x, 8, noise=np.zeros((4, 5)))

    def test_moments_are_sample_averages_of_draws(self):
        rng = np.random.default_rng(13)
        field = make_field(rng, depth=3)
        x = rng.normal(size=(7, 3))
        cache = draw_moments(field, x, 32, seed=5)
        np.testing.assert_allclose(cache.mean, cache.draws.mean(axis=1))
        np.testing.assert_allclose(cache.second, (cache.draws**2).mean(axis=1))
        np.testing.assert_allclose(cache.exp_pos, np.exp(cache.draws).mean(axis=1))
        np.testing.assert_allclose(cache.exp_neg, np.exp(-cache.draws).mean(axis=1))

    def test_identity_flow_reproduces_conditional_draws(self):
        rng = np.random.default_rng(14)
        field = make_field(rng, depth=0)
        assert field.flow.depth == 0
        x = rng.normal(size=(6, 3))
        noise = rng.normal(size=(6, 9))
        cache = draw_moments(field, x, 9, noise=noise)
        mean, var = field.conditional(x)
        expect = mean[:, None] + np.sqrt(var)[:, None] * noise
        np.testing.assert_allclose(cache.draws, expect, atol=1e-12)
        np.testing.assert_array_equal(cache.eps, noise)

    def test_dead_rows_hold_neutral_fills(self):
        rng = np.random.default_rng(15)
        field = make_field(rng)
        x = rng.normal(size=(5, 3))
        live = np.array([True, False, True, False, True])
        cache = draw_moments(field, x, 6, seed=2, live=live)
        for row in (1, 3):
            np.testing.assert_array_equal(cache.draws[row], 0.0)
            np.testing.assert_array_equal(cache.eps[row], 0.0)
            assert cache.mean[row] == 0.0
            assert cache.second[row] == 0.0
            assert cache.exp_pos[row] == 1.0
            assert cache.exp_neg[row] == 1.0
        assert np.all(cache.draws[live] != 0.0)

    def test_live_subset_rows_match_full_evaluation(self):
        # Dropping rows must not change the surviving rows' draws when the
        # same per-row noise matrix is passed in.
        rng = np.random.default_rng(16)
        field = make_field(rng, depth=0)
        x = rng.normal(size=(6, 3))
        noise = rng.normal(size=(6, 4))
        full = draw_moments(field, x, 4, noise=noise)
        live = np.array([True, True, False, True, False, True])
        part = draw_moments(field, x, 4, noise=noise, live=live)
        np.testing.assert_allclose(part.draws[live], full.draws[live], atol=1e-12)

    def test_exponent_clamp_counts_and_bounds(self):
        rng = np.random.default_rng(17)
        field = make_field(rng, depth=0)
        field.log_variance = np.log(1.0e4)
        x = rng.normal(size=(10, 3))
        cache = draw_moments(field, x, 32, seed=7)
        assert np.abs(cache.draws).max() > EXP_CLAMP
        assert cache.clamp_count > 0
        assert cache.exp_pos.max() <= np.exp(EXP_CLAMP) + 1e-9
        assert cache.exp_neg.max() <= np.exp(EXP_CLAMP) + 1e-9

    def test_scaled_exp_matches_cached_moments_at_unit_scale(self):
        rng = np.random.default_rng(18)
        field = make_field(rng, depth=2)
        x = rng.normal(size=(5, 3))
        cache = draw_moments(field, x, 16, seed=3)
        pos, neg = cache.scaled_exp(np.ones(5))
        np.testing.assert_allclose(pos, cache.exp_pos, atol=1e-12)
        np.testing.assert_allclose(neg, cache.exp_neg, atol=1e-12)
        pos0, neg0 = cache.scaled_exp(np.zeros(5))
        np.testing.assert_allclose(pos0, 1.0)
        np.testing.assert_allclose(neg0, 1.0)

    def test_scaled_exp_interpolates_small_scales(self):
        rng = np.random.default_rng(19)
        field = make_field(rng, depth=1)
        x = rng.normal(size=(4, 3))
        cache = draw_moments(field, x, 8, seed=4)
        scale = np.full(4, 0.3)
        pos, neg = cache.scaled_exp(scale)
        np.testing.assert_allclose(pos, np.exp(0.3 * cache.draws).mean(axis=1))
        np.testing.assert_allclose(neg, np.exp(-0.3 * cache.draws).mean(axis=1))


class TestLiveMasks:
    def test_requires_active(self):
        g = small_grid([0.5], [0.5], [True], [1.0])
        with pytest.raises(ValidationError):
            live_masks(g)

    def test_edge_rules(self):
        # Rows exercise: both hazards active w/ obs; ls only w/o obs;
        # building only w/ obs; nothing active.
        g = small_grid(
            prior_ls=[0.5, 0.5, 0.0, 0.0],
            prior_lf=[0.5, 0.0, 0.0, 0.0],
            has_building=[True, False, True, False],
            dpm=[1.0, np.nan, 2.0, np.nan],
        )
        g = compute_active_masks(g, prior_floor=0.1)
        masks = live_masks(g)
        np.testing.assert_array_equal(masks["lam_ls"], [True, False, False, False])
        np.testing.assert_array_equal(masks["lam_lf"], [True, False, False, False])
        np.testing.assert_array_equal(masks["lam_bd"], [True, False, True, False])
        np.testing.assert_array_equal(masks["gam_als"], [True, True, False, False])
        np.testing.assert_array_equal(masks["gam_alf"], [True, False, False, False])
        np.testing.assert_array_equal(masks["gam_ls"], [True, False, False, False])
        np.testing.assert_array_equal(masks["gam_lf"], [True, False, False, False])
        assert set(masks) == set(FIELD_NAMES)


def test_field_posterior_mean_map_fills_nan():
    rng = np.random.default_rng(20)
    field = make_field(rng)
    x = rng.normal(size=(6, 3))
    live = np.array([True, False, True, True, False, True])
    surface = field_posterior_mean_map(field, x, live, 16, seed=8)
    assert np.isnan(surface[~live]).all()
    cache = draw_moments(field, x, 16, seed=8, live=live)
    np.testing.assert_allclose(surface[live], cache.mean[live])
