import numpy as np
import pytest
import torch

from aerofield.conditioning import (
    FUSED_DIM,
    POINT_FEATURE_DIM,
    ConditioningError,
    FeatureExtractor,
    FusedFeature,
    FusionNetwork,
    PointFeature,
    SourceBundle,
    extract_features,
    fuse_attention,
    fuse_pool,
    point_feature,
    sample_point_features,
)
from aerofield.geometry import CameraIntrinsics, bilinear_sample, project
from aerofield.scenedata import CameraFrame, look_at_pose


def make_frame(rng, size=16, radius=4.0):
    intr = CameraIntrinsics(fx=1.5 * size, fy=1.5 * size, cx=(size - 1) / 2,
                            cy=(size - 1) / 2, width=size, height=size)
    direction = rng.standard_normal(3)
    direction[2] = abs(direction[2]) + 0.5
    pos = radius * direction / np.linalg.norm(direction)
    pose = look_at_pose(pos, np.zeros(3))
    image = rng.uniform(size=(size, size, 3))
    return CameraFrame(image=image, intrinsics=intr, pose=pose, altitude_tag=0)


class TestDataTypes:
    def test_point_feature_length(self):
        with pytest.raises(ConditioningError):
            PointFeature(vector=np.zeros(34), valid=True)

    def test_invalid_must_be_zero(self):
        with pytest.raises(ConditioningError):
            PointFeature(vector=np.ones(POINT_FEATURE_DIM), valid=False)
        PointFeature(vector=np.zeros(POINT_FEATURE_DIM), valid=False)

    def test_fused_feature_finite(self):
        with pytest.raises(ConditioningError):
            FusedFeature(vector=np.full(FUSED_DIM, np.nan))
        with pytest.raises(ConditioningError):
            FusedFeature(vector=np.zeros(FUSED_DIM + 1))


class TestInit:
    def test_biases_zero_weights_bounded(self):
        net = FusionNetwork(seed=5)
        for name, p in net.named_parameters():
            if name.endswith("bias") and "ln" not in name:
                assert torch.all(p == 0), name
            elif "ln" not in name:
                fan_in = p.shape[1] if p.dim() == 2 else int(np.prod(p.shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                assert p.abs().max() <= bound + 1e-7, name

    def test_uniform_variance(self):
        # variance of U(-b, b) is b^2 / 3 with b = fan_in^-1/2
        ext = FeatureExtractor(seed=3)
        w = ext.enc2.weight  # fan_in = 16 * 9 = 144, plenty of entries
        fan_in = 16 * 9
        want = (1.0 / fan_in) / 3.0
        got = float(w.detach().double().var())
        assert abs(got - want) / want < 0.15

    def test_seed_determinism(self):
        a = FeatureExtractor(seed=9)
        b = FeatureExtractor(seed=9)
        c = FeatureExtractor(seed=10)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        assert not all(torch.equal(pa, pc)
                       for pa, pc in zip(a.parameters(), c.parameters()))


class TestFeatureExtractor:
    def test_output_shape_full_resolution(self):
        ext = FeatureExtractor(seed=0)
        out = ext(torch.rand(3, 3, 24, 32))
        assert out.shape == (3, 32, 24, 32)

    def test_rejects_bad_size(self):
        ext = FeatureExtractor(seed=0)
        with pytest.raises(ConditioningError):
            ext(torch.rand(1, 3, 30, 32))

    def test_extract_features_accepts_list(self):
        ext = FeatureExtractor(seed=0)
        rng = np.random.default_rng(0)
        imgs = [rng.uniform(size=(16, 16, 3)) for _ in range(2)]
        out = extract_features(imgs, ext)
        assert out.shape == (2, 32, 16, 16)
        with pytest.raises(ConditioningError):
            extract_features([imgs[0], rng.uniform(size=(8, 8, 3))], ext)


class TestPointFeatureSampling:
    def test_rgb_channels_match_bilinear_oracle(self):
        rng = np.random.default_rng(1)
        frames = [make_frame(rng) for _ in range(3)]
        ext = FeatureExtractor(seed=1, dtype=torch.float64)
        maps = extract_features([f.image for f in frames], ext)
        for _ in range(20):
            q = rng.uniform(-0.5, 0.5, size=3)
            feats = point_feature(q, frames, maps)
            for frame, feat in zip(frames, feats):
                coord, depth, ok = project(q, frame.intrinsics, frame.pose)
                assert feat.valid == ok
                if ok:
                    want = bilinear_sample(frame.image, coord)
                    assert np.allclose(feat.vector[:3], want, atol=1e-6)

    def test_learned_channels_match_map_oracle(self):
        rng = np.random.default_rng(2)
        frames = [make_frame(rng)]
        ext = FeatureExtractor(seed=2, dtype=torch.float64)
        maps = extract_features([f.image for f in frames], ext)
        grid = maps[0].permute(1, 2, 0).detach().numpy()
        q = np.array([0.2, -0.1, 0.3])
        feats = point_feature(q, frames, maps)
        coord, _, ok = project(q, frames[0].intrinsics, frames[0].pose)
        assert ok
        assert np.allclose(feats[0].vector[3:], bilinear_sample(grid, coord),
                           atol=1e-6)

    def test_behind_camera_invalid(self):
        rng = np.random.default_rng(3)
        frame = make_frame(rng, radius=2.0)
        ext = FeatureExtractor(seed=3)
        maps = extract_features([frame.image], ext)
        behind = frame.pose.translation * 2.0  # past the camera, away from origin
        feats = point_feature(behind, [frame], maps)
        assert not feats[0].valid
        assert np.all(feats[0].vector == 0)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        frames = [make_frame(rng) for _ in range(4)]
        ext = FeatureExtractor(seed=4, dtype=torch.float64)
        maps = extract_features([f.image for f in frames], ext)
        bundle = SourceBundle.from_frames(frames, maps)
        pts = rng.uniform(-1, 1, size=(10, 3))
        tokens, valid = sample_point_features(
            torch.as_tensor(pts, dtype=torch.float64), bundle)
        for i in range(10):
            feats = point_feature(pts[i], frames, maps)
            for j, f in enumerate(feats):
                assert bool(valid[i, j]) == f.valid
                assert np.allclose(tokens[i, j].detach().numpy(), f.vector,
                                   atol=1e-9)


def random_tokens(rng, p, v, n_valid=None):
    tokens = torch.as_tensor(rng.standard_normal((p, v, POINT_FEATURE_DIM)),
                             dtype=torch.float64)
    valid = torch.ones(p, v, dtype=torch.bool)
    if n_valid is not None:
        for i in range(p):
            off = rng.choice(v, size=v - n_valid, replace=False)
            valid[i, off] = False
    tokens = tokens * valid.unsqueeze(-1)
    return tokens, valid


class TestFusion:
    def test_permutation_invariance_all_modes(self):
        rng = np.random.default_rng(5)
        net = FusionNetwork(seed=5)  # float32, matching the deployed precision
        tokens, valid = random_tokens(rng, 8, 6, n_valid=4)
        t32, v32 = tokens.float(), valid
        for mode in ("attention", "avg", "max"):
            base = net(t32, v32, mode=mode)
            for _ in range(100):
                perm = torch.as_tensor(rng.permutation(6))
                out = net(t32[:, perm], v32[:, perm], mode=mode)
                assert (out - base).abs().max() < 1e-5, mode

    def test_masked_tokens_have_no_influence(self):
        rng = np.random.default_rng(6)
        net = FusionNetwork(seed=6, dtype=torch.float64)
        tokens, valid = random_tokens(rng, 5, 6, n_valid=3)
        garbage = tokens + torch.as_tensor(
            rng.standard_normal(tokens.shape)) * (~valid).unsqueeze(-1).double()
        for mode in ("attention", "avg", "max"):
            a = net(tokens, valid, mode=mode)
            b = net(garbage, valid, mode=mode)
            assert torch.allclose(a, b, atol=1e-12), mode

    def test_all_invalid_yields_zero(self):
        net = FusionNetwork(seed=7, dtype=torch.float64)
        tokens = torch.zeros(3, 4, POINT_FEATURE_DIM, dtype=torch.float64)
        valid = torch.zeros(3, 4, dtype=torch.bool)
        for mode in ("attention", "avg", "max"):
            out = net(tokens, valid, mode=mode)
            assert torch.all(out == 0), mode

    def test_avg_pool_oracle(self):
        rng = np.random.default_rng(8)
        net = FusionNetwork(seed=8, dtype=torch.float64)
        tokens, valid = random_tokens(rng, 4, 5, n_valid=2)
        out = net(tokens, valid, mode="avg")
        emb = net.embed(tokens) * valid.unsqueeze(-1).double()
        want = emb.sum(dim=1) / valid.sum(dim=1, keepdim=True).double()
        assert torch.allclose(out, want, atol=1e-12)

    def test_max_pool_oracle(self):
        rng = np.random.default_rng(9)
        net = FusionNetwork(seed=9, dtype=torch.float64)
        tokens, valid = random_tokens(rng, 4, 5, n_valid=2)
        out = net(tokens, valid, mode="max")
        emb = net.embed(tokens)
        emb = emb.masked_fill(~valid.unsqueeze(-1), float("-inf"))
        assert torch.allclose(out, emb.max(dim=1).values, atol=1e-12)

    def test_output_width(self):
        net = FusionNetwork(seed=10)
        tokens = torch.rand(2, 3, POINT_FEATURE_DIM)
        out = net(tokens, torch.ones(2, 3, dtype=torch.bool))
        assert out.shape == (2, FUSED_DIM)

    def test_wrapper_round_trip(self):
        rng = np.random.default_rng(11)
        net = FusionNetwork(seed=11, dtype=torch.float64)
        feats = [PointFeature(vector=rng.standard_normal(POINT_FEATURE_DIM),
                              valid=True) for _ in range(4)]
        feats.append(PointFeature(vector=np.zeros(POINT_FEATURE_DIM), valid=False))
        fused = fuse_attention(feats, net)
        assert fused.vector.shape == (FUSED_DIM,)
        for mode in ("avg", "max"):
            assert fuse_pool(feats, mode, net).vector.shape == (FUSED_DIM,)
        with pytest.raises(ConditioningError):
            fuse_pool(feats, "attention", net)

    def test_gradient_flows_to_maps(self):
        # fused output must be differentiable w.r.t. the extractor output
        rng = np.random.default_rng(12)
        frames = [make_frame(rng) for _ in range(2)]
        ext = FeatureExtractor(seed=12, dtype=torch.float64)
        maps = extract_features([f.image for f in frames], ext)
        bundle = SourceBundle.from_frames(frames, maps)
        pts = torch.as_tensor(rng.uniform(-0.3, 0.3, size=(5, 3)))
        tokens, valid = sample_point_features(pts, bundle)
        net = FusionNetwork(seed=13, dtype=torch.float64)
        net(tokens, valid).sum().backward()
        grads = [p.grad for p in ext.parameters()]
        assert any(g is not None and g.abs().sum() > 0 for g in grads)
