"""Trainable image features and per-point fusion across source views.

A point feature is 3 interpolated RGB channels concatenated with 32
learned channels sampled at the point's projection into a source view
(35 channels total). Fusion reduces the V per-source features to one
64-dim conditioning vector, either through a 2-block self-attention
transformer or by avg/max pooling of the embedded tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import CameraIntrinsics, DEPTH_EPS

POINT_FEATURE_DIM = 35  # 3 RGB + 32 learned channels
FUSED_DIM = 64


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class PointFeature:
    vector: np.ndarray  # length 35; all zeros when invalid
    valid: bool

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if v.shape[0] != POINT_FEATURE_DIM:
            raise ConditioningError(f"point feature must have {POINT_FEATURE_DIM} entries")
        if not self.valid and np.any(v != 0):
            raise ConditioningError("invalid point features must be all zeros")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class FusedFeature:
    vector: np.ndarray  # length 64

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if v.shape[0] != FUSED_DIM or not np.all(np.isfinite(v)):
            raise ConditioningError("fused feature must be 64 finite floats")
        object.__setattr__(self, "vector", v)


def _seeded_uniform(shape, fan_in, gen):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound


def _init_module(module: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                m.weight.copy_(_seeded_uniform(m.weight.shape, m.in_features, gen))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(_seeded_uniform(m.weight.shape, fan_in, gen))
                if m.bias is not None:
                    m.bias.zero_()


class FeatureExtractor(nn.Module):
    """Encoder-decoder over RGB images producing full-resolution feature maps.

    Three stride-2 encoder stages, mirrored decoder with skip connections,
    32-channel output head. Input (V, 3, H, W), output (V, 32, H, W);
    H and W must be divisible by 8.
    """

    def __init__(self, channels=(16, 32, 64), out_channels: int = 32,
                 seed: int = 0, dtype=torch.float32):
        super().__init__()
        c1, c2, c3 = channels
        self.enc1 = nn.Conv2d(3, c1, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.dec3 = nn.Conv2d(c3 + c2, c2, 3, padding=1)
        self.dec2 = nn.Conv2d(c2 + c1, c1, 3, padding=1)
        self.dec1 = nn.Conv2d(c1 + 3, c1, 3, padding=1)
        self.head = nn.Conv2d(c1, out_channels, 1)
        _init_module(self, seed)
        self.to(dtype)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ConditioningError(f"expected (V, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] % 8 or images.shape[3] % 8:
            raise ConditioningError("image height and width must be divisible by 8")
        up = lambda x: F.interpolate(x, scale_factor=2, mode="nearest")
        e1 = F.relu(self.enc1(images))
        e2 = F.relu(self.enc2(e1))
        e3 = F.relu(self.enc3(e2))
        d3 = F.relu(self.dec3(torch.cat([up(e3), e2], 1)))
        d2 = F.relu(self.dec2(torch.cat([up(d3), e1], 1)))
        d1 = F.relu(self.dec1(torch.cat([up(d2), images], 1)))
        return self.head(d1)


def extract_features(images, extractor: FeatureExtractor) -> torch.Tensor:
    """Run the extractor over a list/stack of same-sized RGB images.

    Accepts (V, H, W, 3) numpy/tensor in [0, 1] or a list of (H, W, 3);
    returns (V, 32, H, W).
    """
    if isinstance(images, (list, tuple)):
        shapes = {tuple(np.asarray(im).shape) for im in images}
        if len(shapes) != 1:
            raise ConditioningError(f"mismatched image sizes: {sorted(shapes)}")
        images = np.stack([np.asarray(im) for im in images])
    dtype = next(extractor.parameters()).dtype
    t = torch.as_tensor(np.asarray(images), dtype=dtype)
    if t.dim() != 4 or t.shape[-1] != 3:
        raise ConditioningError(f"expected (V, H, W, 3) images, got {tuple(t.shape)}")
    return extractor(t.permute(0, 3, 1, 2).contiguous())


class SourceBundle:
    """Tensors for a fixed set of source views: images, feature maps, cameras."""

    def __init__(self, images: torch.Tensor, maps: torch.Tensor,
                 rotations: torch.Tensor, centers: torch.Tensor,
                 intr: CameraIntrinsics):
        self.images = images        # (V, 3, H, W)
        self.maps = maps            # (V, 32, H, W)
        self.rotations = rotations  # (V, 3, 3) camera-to-world
        self.centers = centers      # (V, 3)
        self.intr = intr

    @staticmethod
    def from_frames(frames, maps: torch.Tensor) -> "SourceBundle":
        dtype = maps.dtype
        images = torch.stack([
            torch.as_tensor(f.image, dtype=dtype).permute(2, 0, 1) for f in frames])
        rot = torch.stack([torch.as_tensor(f.pose.rotation, dtype=dtype) for f in frames])
        cen = torch.stack([torch.as_tensor(f.pose.translation, dtype=dtype) for f in frames])
        return SourceBundle(images, maps, rot, cen, frames[0].intrinsics)

    @property
    def count(self) -> int:
        return self.images.shape[0]


def project_to_sources(points: torch.Tensor, bundle: SourceBundle):
    """Project (P, 3) world points into every source camera.

    Returns (uv (P, V, 2) pixel coords, valid (P, V) bool).
    """
    intr = bundle.intr
    # p_cam[p, v] = R_v^T (q_p - c_v)
    rel = points[:, None, :] - bundle.centers[None, :, :]
    p_cam = torch.einsum("pvj,vjk->pvk", rel, bundle.rotations)
    depth = -p_cam[..., 2]
    safe = torch.where(depth > DEPTH_EPS, depth, torch.ones_like(depth))
    u = intr.cx + intr.fx * p_cam[..., 0] / safe
    v = intr.cy + intr.fy * p_cam[..., 1] / safe
    valid = ((depth > DEPTH_EPS)
             & (u >= 0) & (u <= intr.width - 1)
             & (v >= 0) & (v <= intr.height - 1))
    return torch.stack([u, v], dim=-1), valid


def sample_point_features(points: torch.Tensor, bundle: SourceBundle):
    """Per-source 35-dim features for (P, 3) points.

    Returns (tokens (P, V, 35), valid (P, V)); invalid entries are zeroed.
    Differentiable with respect to the feature maps.
    """
    uv, valid = project_to_sources(points, bundle)
    p, v = uv.shape[0], uv.shape[1]
    h, w = bundle.images.shape[2], bundle.images.shape[3]
    gx = uv[..., 0].clamp(0, w - 1) / (w - 1) * 2 - 1
    gy = uv[..., 1].clamp(0, h - 1) / (h - 1) * 2 - 1
    grid = torch.stack([gx, gy], dim=-1).transpose(0, 1).unsqueeze(2)  # (V, P, 1, 2)
    stacked = torch.cat([bundle.images, bundle.maps], dim=1)  # (V, 35, H, W)
    sampled = F.grid_sample(stacked, grid, mode="bilinear",
                            align_corners=True)  # (V, 35, P, 1)
    tokens = sampled.squeeze(-1).permute(2, 0, 1)  # (P, V, 35)
    return tokens * valid.unsqueeze(-1).to(tokens.dtype), valid


def point_feature(q, sources, maps: torch.Tensor):
    """Spec-level wrapper: one 3D point against V CameraFrame sources.

    `maps` is the (V, 32, H, W) output of extract_features for `sources`.
    Returns a list of V PointFeature.
    """
    if len(sources) != maps.shape[0]:
        raise ConditioningError("feature maps must correspond one-to-one with sources")
    bundle = SourceBundle.from_frames(sources, maps)
    pts = torch.as_tensor(np.asarray(q, dtype=np.float64),
                          dtype=maps.dtype).reshape(1, 3)
    tokens, valid = sample_point_features(pts, bundle)
    out = []
    for i in range(len(sources)):
        ok = bool(valid[0, i])
        vec = tokens[0, i].detach().double().numpy() if ok else np.zeros(POINT_FEATURE_DIM)
        out.append(PointFeature(vector=vec, valid=ok))
    return out


class TransformerBlock(nn.Module):
    """Pre-norm multi-head self-attention + feed-forward, both residual."""

    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        if dim % heads:
            raise ConditioningError("model dim must be divisible by head count")
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ff_dim)
        self.ff2 = nn.Linear(ff_dim, dim)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        # x: (P, V, D); key_mask: (P, V) bool, False = excluded from keys/values
        p, v, d = x.shape
        hd = d // self.heads
        h = self.ln1(x)
        q, k, val = self.qkv(h).chunk(3, dim=-1)
        q = q.view(p, v, self.heads, hd).transpose(1, 2)  # (P, H, V, hd)
        k = k.view(p, v, self.heads, hd).transpose(1, 2)
        val = val.view(p, v, self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)  # (P, H, V, V)
        neg = torch.finfo(scores.dtype).min
        scores = scores.masked_fill(~key_mask[:, None, None, :], neg)
        att = torch.softmax(scores, dim=-1)
        att = att * key_mask[:, None, None, :].to(att.dtype)  # all-masked rows -> 0
        ctx = (att @ val).transpose(1, 2).reshape(p, v, d)
        x = x + self.out(ctx)
        return x + self.ff2(F.relu(self.ff1(self.ln2(x))))


class FusionNetwork(nn.Module):
    """Token embedding, 2 transformer blocks, and a pooling head.

    No positional encoding anywhere, so the output is invariant to the
    order of source views. Pool modes 'avg' and 'max' bypass the
    transformer and the head, pooling embedded tokens directly.
    """

    def __init__(self, in_dim: int = POINT_FEATURE_DIM, dim: int = FUSED_DIM,
                 heads: int = 4, ff_dim: int = 128, blocks: int = 2,
                 seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.embed = nn.Linear(in_dim, dim)
        self.blocks = nn.ModuleList(
            [TransformerBlock(dim, heads, ff_dim) for _ in range(blocks)])
        self.head = nn.Linear(dim, dim)
        _init_module(self, seed)
        self.to(dtype)

    def forward(self, tokens: torch.Tensor, valid: torch.Tensor,
                mode: str = "attention") -> torch.Tensor:
        # tokens: (P, V, 35); valid: (P, V) bool -> fused (P, 64)
        if tokens.shape[1] == 0:
            raise ConditioningError("at least one source token is required")
        mask = valid.to(tokens.dtype).unsqueeze(-1)  # (P, V, 1)
        x = self.embed(tokens) * mask
        count = valid.sum(dim=1, keepdim=True).to(tokens.dtype).clamp(min=1.0)
        any_valid = valid.any(dim=1, keepdim=True).to(tokens.dtype)
        if mode == "attention":
            safe_valid = valid.clone()
            # points with zero valid sources: keep softmax finite, zero output later
            safe_valid[~valid.any(dim=1)] = True
            for block in self.blocks:
                x = block(x, safe_valid)
            pooled = (x * mask).sum(dim=1) / count
            return self.head(pooled) * any_valid
        if mode == "avg":
            return (x * mask).sum(dim=1) / count * any_valid
        if mode == "max":
            neg = torch.finfo(x.dtype).min
            filled = x.masked_fill(~valid.unsqueeze(-1), neg)
            return filled.max(dim=1).values * any_valid
        raise ConditioningError(f"unknown fusion mode: {mode}")


def _tokens_from_point_features(feats, dtype):
    if not feats:
        raise ConditioningError("empty point-feature list")
    tokens = torch.as_tensor(np.stack([f.vector for f in feats]), dtype=dtype)
    valid = torch.tensor([f.valid for f in feats], dtype=torch.bool)
    return tokens.unsqueeze(0), valid.unsqueeze(0)


def fuse_attention(feats, fusion: FusionNetwork) -> FusedFeature:
    """Attention-fuse a list of V PointFeature into one 64-dim vector."""
    dtype = next(fusion.parameters()).dtype
    tokens, valid = _tokens_from_point_features(feats, dtype)
    with torch.no_grad():
        out = fusion(tokens, valid, mode="attention")
    return FusedFeature(vector=out[0].double().numpy())


def fuse_pool(feats, mode: str, fusion: FusionNetwork) -> FusedFeature:
    """Pool a list of V PointFeature (mode 'avg' or 'max') after embedding."""
    if mode not in ("avg", "max"):
        raise ConditioningError(f"pool mode must be 'avg' or 'max', got {mode!r}")
    dtype = next(fusion.parameters()).dtype
    tokens, valid = _tokens_from_point_features(feats, dtype)
    with torch.no_grad():
        out = fusion(tokens, valid, mode=mode)
    return FusedFeature(vector=out[0].double().numpy())
