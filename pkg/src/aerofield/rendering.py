"""Hierarchical sampling, volume compositing, and the per-ray pipeline.

The coarse pass runs on stratified samples; the fine pass reuses those
t-values plus importance samples drawn from the coarse weights. Randomness
is keyed per ray from (seed, ray id) so the execution schedule never
changes results.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .conditioning import FusionNetwork, SourceBundle, sample_point_features
from .field import FieldNetwork

WEIGHT_EPS = 1e-5  # floor added to importance-sampling bin weights
T_DEDUP_TOL = 1e-9


class RenderError(ValueError):
    pass


def ray_rng(seed: int, ray_id: int) -> np.random.Generator:
    """Counter-based stream for one ray; independent of evaluation order."""
    return np.random.Generator(
        np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF,
                                       ray_id & 0xFFFFFFFFFFFFFFFF],
                                      dtype=np.uint64)))


@dataclass(frozen=True)
class RaySamples:
    t_values: np.ndarray  # strictly ascending
    positions: np.ndarray  # (N, 3)
    deltas: np.ndarray  # t_{k+1} - t_k, terminal delta = t_far - t_N

    def __post_init__(self):
        t = np.asarray(self.t_values, dtype=np.float64)
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise RenderError("t_values must be strictly ascending")
        if np.any(np.asarray(self.deltas) < 0):
            raise RenderError("deltas must be non-negative")


@dataclass(frozen=True)
class CompositeResult:
    color: np.ndarray  # (3,)
    weights: np.ndarray  # (N,)
    transmittance: np.ndarray  # (N,)
    opacity: float


def stratified_sample(t_near: float, t_far: float, n: int,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """One sample per equal-width bin; bin centers when rng is None."""
    if n < 1 or not t_near < t_far:
        raise RenderError("need n >= 1 and t_near < t_far")
    edges = np.linspace(t_near, t_far, n + 1)
    if rng is None:
        u = np.full(n, 0.5)
    else:
        u = rng.uniform(size=n)
    return edges[:-1] + u * (edges[1:] - edges[:-1])


def importance_sample(bin_edges: np.ndarray, weights: np.ndarray, n_f: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF samples of the piecewise-constant density ~ weights + eps.

    Zero total weight degenerates to uniform sampling over the full range.
    Output is sorted.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise RenderError("importance weights must be non-negative")
    edges = np.asarray(bin_edges, dtype=np.float64)
    w = weights + WEIGHT_EPS
    cdf = np.concatenate([[0.0], np.cumsum(w / w.sum())])
    cdf[-1] = 1.0
    u = rng.uniform(size=n_f)
    idx = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(weights) - 1)
    lo, hi = cdf[idx], cdf[idx + 1]
    frac = np.where(hi > lo, (u - lo) / np.maximum(hi - lo, 1e-300), 0.0)
    samples = edges[idx] + frac * (edges[idx + 1] - edges[idx])
    return np.sort(samples)


def composite_torch(sigma: torch.Tensor, rgb: torch.Tensor, deltas: torch.Tensor):
    """Batched front-to-back compositing.

    sigma, deltas: (R, N); rgb: (R, N, 3). Returns (color (R, 3),
    weights (R, N), transmittance (R, N)).
    """
    tau = sigma * deltas
    accum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(accum[..., :1]),
                                  accum[..., :-1]], dim=-1))
    alpha = 1.0 - torch.exp(-tau)
    weights = trans * alpha
    color = (weights.unsqueeze(-1) * rgb).sum(dim=-2)
    return color, weights, trans


def composite(sigma, rgb, deltas) -> CompositeResult:
    """Single-ray compositing over numpy inputs (64-bit)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(sigma < 0) or np.any(deltas < 0):
        raise RenderError("sigma and deltas must be non-negative")
    c, w, t = composite_torch(torch.from_numpy(sigma)[None],
                              torch.from_numpy(rgb)[None],
                              torch.from_numpy(deltas)[None])
    return CompositeResult(color=c[0].numpy(), weights=w[0].numpy(),
                           transmittance=t[0].numpy(),
                           opacity=float(w[0].sum()))


def union_with_dedup(a: np.ndarray, b: np.ndarray, tol: float = T_DEDUP_TOL) -> np.ndarray:
    """Sorted union of two t-sets, dropping values closer than `tol`."""
    merged = np.sort(np.concatenate([a, b]))
    if merged.size == 0:
        return merged
    keep = np.concatenate([[True], np.diff(merged) > tol])
    return merged[keep]


@dataclass
class RenderOptions:
    n_coarse: int = 64
    n_fine: int = 64
    fusion_mode: str = "attention"  # attention | avg | max | none
    background: tuple | None = None


@dataclass
class RenderModel:
    """All trainable state plus the sampling/fusion configuration."""

    extractor: object  # FeatureExtractor, unused when fusion_mode == "none"
    fusion_coarse: FusionNetwork | None
    fusion_fine: FusionNetwork | None
    field_coarse: FieldNetwork = dc_field(default=None)
    field_fine: FieldNetwork = dc_field(default=None)
    options: RenderOptions = dc_field(default_factory=RenderOptions)

    @property
    def dtype(self):
        return next(self.field_coarse.parameters()).dtype

    def parameter_groups(self):
        """(extractor params, field+fusion params) as flat lists."""
        extractor = list(self.extractor.parameters()) if self.extractor is not None else []
        rest = list(self.field_coarse.parameters()) + list(self.field_fine.parameters())
        if self.fusion_coarse is not None:
            rest += list(self.fusion_coarse.parameters())
        if self.fusion_fine is not None:
            rest += list(self.fusion_fine.parameters())
        return extractor, rest


def _field_inputs(model: RenderModel, positions: torch.Tensor,
                  bundle: SourceBundle | None, which: str) -> torch.Tensor | None:
    if model.options.fusion_mode == "none":
        return None
    fusion = model.fusion_coarse if which == "coarse" else model.fusion_fine
    tokens, valid = sample_point_features(positions, bundle)
    mode = model.options.fusion_mode
    return fusion(tokens, valid, mode=mode if mode != "none" else "avg")


def _run_pass(model: RenderModel, which: str, t_vals: torch.Tensor,
              origins: torch.Tensor, dirs: torch.Tensor, t_far: torch.Tensor,
              bundle: SourceBundle | None):
    """One field pass over (R, N) t-values; returns (color, weights, trans)."""
    r, n = t_vals.shape
    positions = origins[:, None, :] + t_vals[..., None] * dirs[:, None, :]
    flat_pos = positions.reshape(-1, 3)
    flat_dir = dirs[:, None, :].expand(r, n, 3).reshape(-1, 3)
    fused = _field_inputs(model, flat_pos, bundle, which)
    net = model.field_coarse if which == "coarse" else model.field_fine
    sigma, _, rgb = net(flat_pos, flat_dir, fused)
    sigma = sigma.reshape(r, n)
    rgb = rgb.reshape(r, n, 3)
    deltas = torch.cat([t_vals[:, 1:] - t_vals[:, :-1],
                        (t_far[:, None] - t_vals[:, -1:])], dim=-1)
    deltas = deltas.clamp(min=0.0)
    color, weights, trans = composite_torch(sigma, rgb, deltas)
    if model.options.background is not None:
        bg = torch.as_tensor(model.options.background, dtype=color.dtype)
        residual = trans[:, -1] * torch.exp(-sigma[:, -1] * deltas[:, -1])
        color = color + residual[:, None] * bg
    return color, weights, trans


def render_rays(model: RenderModel, origins: np.ndarray, dirs: np.ndarray,
                t_near: np.ndarray, t_far: np.ndarray,
                bundle: SourceBundle | None, mode: str, seed: int,
                ray_ids: np.ndarray):
    """Render a batch of rays sharing one source bundle.

    mode "train" jitters stratified samples; "eval" uses bin centers. The
    importance stage always draws from the per-ray stream, so eval renders
    are reproducible. Returns a dict with coarse/fine colors (torch, with
    graph in train mode) and numpy t-sets.
    """
    if mode not in ("train", "eval"):
        raise RenderError(f"mode must be 'train' or 'eval', got {mode!r}")
    n_rays = origins.shape[0]
    opts = model.options
    coarse_t = np.empty((n_rays, opts.n_coarse))
    fine_t = np.empty((n_rays, opts.n_coarse + opts.n_fine))

    dtype = model.dtype
    o_t = torch.as_tensor(origins, dtype=dtype)
    d_t = torch.as_tensor(dirs, dtype=dtype)
    far_t = torch.as_tensor(t_far, dtype=dtype)

    rngs = [ray_rng(seed, int(rid)) for rid in ray_ids]
    for i, rng in enumerate(rngs):
        coarse_t[i] = stratified_sample(t_near[i], t_far[i], opts.n_coarse,
                                        rng if mode == "train" else None)

    ct = torch.as_tensor(coarse_t, dtype=dtype)
    coarse_color, coarse_w, coarse_trans = _run_pass(
        model, "coarse", ct, o_t, d_t, far_t, bundle)

    w_np = coarse_w.detach().double().numpy()
    pad = np.full((n_rays, opts.n_coarse + opts.n_fine), np.nan)
    lengths = np.empty(n_rays, dtype=np.int64)
    for i, rng in enumerate(rngs):
        edges = np.linspace(t_near[i], t_far[i], opts.n_coarse + 1)
        extra = importance_sample(edges, w_np[i], opts.n_fine, rng)
        union = union_with_dedup(coarse_t[i], extra)
        lengths[i] = union.size
        pad[i, :union.size] = union
        # replicate the last value so every row has equal length; the extra
        # entries get zero delta and cannot change the composite
        pad[i, union.size:] = union[-1]
    fine_t[:] = pad

    ft = torch.as_tensor(fine_t, dtype=dtype)
    fine_color, fine_w, fine_trans = _run_pass(
        model, "fine", ft, o_t, d_t, far_t, bundle)

    return {
        "coarse_color": coarse_color, "fine_color": fine_color,
        "coarse_weights": coarse_w, "fine_weights": fine_w,
        "coarse_trans": coarse_trans, "fine_trans": fine_trans,
        "coarse_t": coarse_t, "fine_t": fine_t, "fine_lengths": lengths,
    }


def render_ray(model: RenderModel, ray, bundle: SourceBundle | None,
               mode: str = "eval", seed: int = 0, ray_id: int = 0):
    """Single-ray wrapper returning (coarse, fine) CompositeResult."""
    out = render_rays(model, ray.origin[None], ray.direction[None],
                      np.array([ray.t_near]), np.array([ray.t_far]),
                      bundle, mode, seed, np.array([ray_id]))
    res = []
    for which in ("coarse", "fine"):
        w = out[f"{which}_weights"][0].detach().double().numpy()
        res.append(CompositeResult(
            color=out[f"{which}_color"][0].detach().double().numpy(),
            weights=w,
            transmittance=out[f"{which}_trans"][0].detach().double().numpy(),
            opacity=float(w.sum())))
    return res[0], res[1]


def batch_loss(coarse: torch.Tensor, fine: torch.Tensor, gt: torch.Tensor,
               reduction: str = "mean") -> torch.Tensor:
    """Summed coarse+fine squared color error, averaged over rays by default."""
    if coarse.shape != gt.shape or fine.shape != gt.shape:
        raise RenderError("prediction/ground-truth batch shapes must match")
    per_ray = ((gt - coarse) ** 2).sum(dim=-1) + ((gt - fine) ** 2).sum(dim=-1)
    if reduction == "mean":
        return per_ray.mean()
    if reduction == "sum":
        return per_ray.sum()
    raise RenderError(f"unknown reduction {reduction!r}")
