import numpy as np
import pytest
import scipy.stats
import torch

from aerofield.field import EncodingConfig, FieldNetwork
from aerofield.geometry import Ray
from aerofield.rendering import (
    RenderError,
    RenderModel,
    RenderOptions,
    batch_loss,
    composite,
    importance_sample,
    ray_rng,
    render_ray,
    render_rays,
    stratified_sample,
    union_with_dedup,
)


class TestRayRng:
    def test_streams_independent_of_order(self):
        a_first = ray_rng(3, 10).uniform(size=4)
        _ = ray_rng(3, 11).uniform(size=4)
        a_again = ray_rng(3, 10).uniform(size=4)
        assert np.array_equal(a_first, a_again)

    def test_distinct_rays_distinct_streams(self):
        assert not np.array_equal(ray_rng(3, 10).uniform(size=4),
                                  ray_rng(3, 11).uniform(size=4))
        assert not np.array_equal(ray_rng(3, 10).uniform(size=4),
                                  ray_rng(4, 10).uniform(size=4))


class TestStratified:
    def test_midpoint_mode_quarter_points(self):
        got = stratified_sample(0.0, 1.0, 4, rng=None)
        assert np.allclose(got, [0.125, 0.375, 0.625, 0.875])

    def test_one_sample_per_bin_ascending(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t0, t1 = 0.3, 5.7
            n = 16
            s = stratified_sample(t0, t1, n, rng)
            edges = np.linspace(t0, t1, n + 1)
            assert np.all(s >= edges[:-1]) and np.all(s <= edges[1:])
            assert np.all(np.diff(s) > 0)

    def test_bad_range(self):
        with pytest.raises(RenderError):
            stratified_sample(1.0, 1.0, 4, None)
        with pytest.raises(RenderError):
            stratified_sample(0.0, 1.0, 0, None)


class TestImportanceSample:
    def test_dominant_weight_lands_in_bin(self):
        edges = np.linspace(0.0, 1.0, 9)
        weights = np.zeros(8)
        weights[3] = 1e9  # dwarfs the epsilon floor on the other bins
        rng = np.random.default_rng(1)
        s = importance_sample(edges, weights, 10_000, rng)
        assert np.all(s >= edges[3]) and np.all(s <= edges[4])

    def test_uniform_weights_ks(self):
        edges = np.linspace(2.0, 6.0, 65)
        rng = np.random.default_rng(2)
        s = importance_sample(edges, np.ones(64), 100_000, rng)
        stat = scipy.stats.kstest(s, scipy.stats.uniform(2.0, 4.0).cdf).statistic
        # 1% critical value of the one-sample KS statistic at n = 1e5
        assert stat < 1.63 / np.sqrt(100_000)

    def test_zero_weights_uniform_fallback(self):
        edges = np.linspace(0.0, 1.0, 33)
        rng = np.random.default_rng(3)
        s = importance_sample(edges, np.zeros(32), 100_000, rng)
        stat = scipy.stats.kstest(s, scipy.stats.uniform(0.0, 1.0).cdf).statistic
        assert stat < 1.63 / np.sqrt(100_000)

    def test_piecewise_density_chi_square(self):
        rng = np.random.default_rng(4)
        n_bins = 16
        edges = np.linspace(0.0, 2.0, n_bins + 1)
        weights = rng.uniform(0.0, 3.0, size=n_bins)
        s = importance_sample(edges, weights, 100_000,
                              np.random.default_rng(5))
        counts, _ = np.histogram(s, bins=edges)
        p = (weights + 1e-5) / (weights + 1e-5).sum()
        result = scipy.stats.chisquare(counts, f_exp=p * 100_000)
        assert result.pvalue > 0.01

    def test_sorted_output(self):
        edges = np.linspace(0.0, 1.0, 9)
        s = importance_sample(edges, np.arange(8.0), 100, np.random.default_rng(6))
        assert np.all(np.diff(s) >= 0)

    def test_negative_weight_rejected(self):
        with pytest.raises(RenderError):
            importance_sample(np.linspace(0, 1, 3), np.array([1.0, -0.1]), 4,
                              np.random.default_rng(0))


def sequential_alpha_oracle(sigma, rgb, deltas):
    """Front-to-back alpha compositing, one sample at a time."""
    t = 1.0
    color = np.zeros(3)
    weights = []
    trans = []
    for s, c, d in zip(sigma, rgb, deltas):
        trans.append(t)
        alpha = 1.0 - np.exp(-s * d)
        weights.append(t * alpha)
        color += t * alpha * np.asarray(c)
        t *= 1.0 - alpha
    return color, np.array(weights), np.array(trans), t


class TestComposite:
    def test_zero_density(self):
        res = composite(np.zeros(5), np.random.default_rng(0).uniform(size=(5, 3)),
                        np.full(5, 0.2))
        assert np.allclose(res.color, 0.0)
        assert np.allclose(res.transmittance, 1.0)
        assert res.opacity == 0.0

    def test_single_sample_log2(self):
        res = composite(np.array([np.log(2.0)]), np.array([[1.0, 0.5, 0.0]]),
                        np.array([1.0]))
        assert abs(res.weights[0] - 0.5) < 1e-12
        residual = res.transmittance[0] * np.exp(-np.log(2.0))
        assert abs(residual - 0.5) < 1e-12

    def test_matches_sequential_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = rng.integers(1, 20)
            sigma = rng.uniform(0, 5, size=n)
            rgb = rng.uniform(0, 1, size=(n, 3))
            deltas = rng.uniform(0, 0.5, size=n)
            got = composite(sigma, rgb, deltas)
            color, weights, trans, _ = sequential_alpha_oracle(sigma, rgb, deltas)
            assert np.allclose(got.color, color, atol=1e-10)
            assert np.allclose(got.weights, weights, atol=1e-10)
            assert np.allclose(got.transmittance, trans, atol=1e-10)

    def test_conservation(self):
        # sum of weights plus residual transmittance is exactly one unit of energy
        rng = np.random.default_rng(8)
        for _ in range(1000):
            n = rng.integers(1, 32)
            sigma = rng.uniform(0, 10, size=n)
            deltas = rng.uniform(0, 1, size=n)
            res = composite(sigma, rng.uniform(size=(n, 3)), deltas)
            residual = res.transmittance[-1] * np.exp(-sigma[-1] * deltas[-1])
            assert abs(res.weights.sum() + residual - 1.0) < 1e-6

    def test_negative_inputs_rejected(self):
        with pytest.raises(RenderError):
            composite(np.array([-1.0]), np.ones((1, 3)), np.array([1.0]))
        with pytest.raises(RenderError):
            composite(np.array([1.0]), np.ones((1, 3)), np.array([-1.0]))


class TestUnionDedup:
    def test_merges_sorted(self):
        out = union_with_dedup(np.array([0.1, 0.5]), np.array([0.3, 0.7]))
        assert np.allclose(out, [0.1, 0.3, 0.5, 0.7])

    def test_drops_near_duplicates(self):
        out = union_with_dedup(np.array([0.5]), np.array([0.5 + 1e-12]))
        assert out.size == 1


def tiny_model(n_coarse=8, n_fine=8, dtype=torch.float64, background=None):
    enc = EncodingConfig(l_pos=2, l_dir=1)
    return RenderModel(
        extractor=None, fusion_coarse=None, fusion_fine=None,
        field_coarse=FieldNetwork(enc=enc, fused_dim=0, seed=11, dtype=dtype),
        field_fine=FieldNetwork(enc=enc, fused_dim=0, seed=12, dtype=dtype),
        options=RenderOptions(n_coarse=n_coarse, n_fine=n_fine,
                              fusion_mode="none", background=background))


class TestRenderRays:
    def test_eval_deterministic(self):
        model = tiny_model()
        o = np.array([[0.0, 0.0, 2.0]])
        d = np.array([[0.0, 0.0, -1.0]])
        a = render_rays(model, o, d, np.array([0.5]), np.array([3.0]),
                        None, "eval", seed=0, ray_ids=np.array([0]))
        b = render_rays(model, o, d, np.array([0.5]), np.array([3.0]),
                        None, "eval", seed=0, ray_ids=np.array([0]))
        assert torch.equal(a["fine_color"], b["fine_color"])

    def test_train_jitter_depends_only_on_ray_id(self):
        model = tiny_model()
        o = np.zeros((2, 3)); o[:, 2] = 2.0
        d = np.tile([0.0, 0.0, -1.0], (2, 1))
        near, far = np.full(2, 0.5), np.full(2, 3.0)
        batch = render_rays(model, o, d, near, far, None, "train", 9,
                            np.array([4, 5]))
        solo = render_rays(model, o[1:], d[1:], near[1:], far[1:], None,
                           "train", 9, np.array([5]))
        assert np.allclose(batch["coarse_t"][1], solo["coarse_t"][0])
        assert torch.allclose(batch["fine_color"][1], solo["fine_color"][0])

    def test_fine_t_contains_coarse_t(self):
        model = tiny_model()
        out = render_rays(model, np.array([[0, 0, 2.0]]),
                          np.array([[0, 0, -1.0]]), np.array([0.5]),
                          np.array([3.0]), None, "train", 0, np.array([7]))
        fine = out["fine_t"][0][:out["fine_lengths"][0]]
        for t in out["coarse_t"][0]:
            assert np.min(np.abs(fine - t)) < 1e-9

    def test_background_fills_empty_space(self):
        # zero-ish density plus a background color: ray color approaches it
        bg = (0.25, 0.5, 0.75)
        model = tiny_model(background=bg)
        ray = Ray(origin=np.array([0.0, 0.0, 50.0]),
                  direction=np.array([0.0, 0.0, 1.0]), t_near=0.1, t_far=0.2)
        coarse, fine = render_ray(model, ray, None)
        assert np.allclose(fine.color, bg, atol=0.05)

    def test_bad_mode(self):
        model = tiny_model()
        with pytest.raises(RenderError):
            render_rays(model, np.zeros((1, 3)), np.array([[0, 0, -1.0]]),
                        np.array([0.1]), np.array([1.0]), None, "predict", 0,
                        np.array([0]))


class TestBatchLoss:
    def test_matches_manual_sum(self):
        g = torch.Generator().manual_seed(0)
        c = torch.rand((5, 3), generator=g)
        f = torch.rand((5, 3), generator=g)
        gt = torch.rand((5, 3), generator=g)
        want = (((gt - c) ** 2).sum(-1) + ((gt - f) ** 2).sum(-1)).mean()
        assert torch.allclose(batch_loss(c, f, gt), want)
        want_sum = (((gt - c) ** 2).sum(-1) + ((gt - f) ** 2).sum(-1)).sum()
        assert torch.allclose(batch_loss(c, f, gt, reduction="sum"), want_sum)

    def test_shape_mismatch(self):
        with pytest.raises(RenderError):
            batch_loss(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(3, 3))
