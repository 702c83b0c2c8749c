"""Optimization loop, metrics, checkpoints, evaluation and the ablation harness."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
import torch
import torch.nn.functional as F

from .conditioning import FeatureExtractor, FusionNetwork, SourceBundle
from .field import EncodingConfig, FieldNetwork
from .geometry import pixel_directions
from .rendering import RenderModel, RenderOptions, batch_loss, render_rays
from .scenedata import LoadedDataset
from .selection import select_sources

CHECKPOINT_MAGIC = b"AEROCKPT"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64,
           "bfloat16": torch.bfloat16}


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 200_000
    rays_per_batch: int = 2048
    lr_extractor: float = 1e-3
    lr_field_fusion: float = 5e-4
    lr_decay_to: float = 0.1  # final lr as a fraction of the initial
    v: int = 10
    n_coarse: int = 64
    n_fine: int = 64
    fusion_mode: str = "attention"  # attention | avg | max | none
    seed: int = 0
    eval_every: int = 0  # 0 = only at the end
    checkpoint_every: int = 0
    views_per_iter: int = 4
    micro_rays: int = 256  # rays per backward chunk
    precision: str = "float32"
    loss_reduction: str = "mean"
    use_background: bool = True
    stratified_selection: bool = False
    heads: int = 4
    ff_dim: int = 128
    l_pos: int = 10
    l_dir: int = 4

    def __post_init__(self):
        for name in ("iterations", "rays_per_batch", "n_coarse", "n_fine",
                     "views_per_iter", "micro_rays"):
            if getattr(self, name) < 1:
                raise TrainError(f"{name} must be >= 1")
        if self.lr_extractor <= 0 or self.lr_field_fusion <= 0:
            raise TrainError("learning rates must be positive")
        if self.fusion_mode not in ("attention", "avg", "max", "none"):
            raise TrainError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.fusion_mode == "none":
            self.v = 0
        elif self.v < 1:
            raise TrainError("v must be >= 1 unless fusion_mode is 'none'")
        if self.precision not in _DTYPES:
            raise TrainError(f"precision must be one of {sorted(_DTYPES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f for f in TrainConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise TrainError(f"unknown config fields: {sorted(unknown)}")
        return TrainConfig(**d)

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def config_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def benchmark_config(fusion_mode: str = "attention", seed: int = 42,
                     iterations: int = 5000) -> TrainConfig:
    """Reference configuration for the end-to-end toy benchmark."""
    return TrainConfig(iterations=iterations, rays_per_batch=1024, v=6,
                       n_coarse=32, n_fine=32, fusion_mode=fusion_mode,
                       seed=seed, eval_every=1000, checkpoint_every=1000)


# ---------------------------------------------------------------------------
# Adam


def adam_step(params, grads, state: dict | None, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              group_name: str = "params") -> dict:
    """Bias-corrected Adam update, in place on `params`.

    `params` and `grads` are matching lists of tensors. Returns the updated
    state (same object when passed in). Non-finite gradients abort.
    """
    if state is None:
        state = {"step": 0,
                 "m": [torch.zeros_like(p) for p in params],
                 "v": [torch.zeros_like(p) for p in params]}
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not torch.isfinite(g).all():
            raise TrainError(f"non-finite gradient in parameter group "
                             f"'{group_name}' (tensor {i}, shape {tuple(g.shape)})")
        m, v = state["m"][i], state["v"][i]
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.add_((m / bc1) / denom, alpha=-lr)
    return state


class TwoGroupAdam:
    """Adam over named parameter groups with fp32 (or fp64) master weights."""

    def __init__(self, groups, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        # groups: list of (name, [params], base_lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.groups = []
        for name, params, lr in groups:
            masters = [p.detach().to(torch.float64 if p.dtype == torch.float64
                                     else torch.float32).clone()
                       for p in params]
            self.groups.append({"name": name, "params": list(params), "lr": lr,
                                "masters": masters, "state": None})

    def step(self, lr_scale: float = 1.0):
        for g in self.groups:
            grads = []
            for p, m in zip(g["params"], g["masters"]):
                if p.grad is None:
                    grads.append(torch.zeros_like(m))
                else:
                    grads.append(p.grad.detach().to(m.dtype))
            g["state"] = adam_step(g["masters"], grads, g["state"],
                                   lr=g["lr"] * lr_scale,
                                   beta1=self.beta1, beta2=self.beta2,
                                   eps=self.eps, group_name=g["name"])
            with torch.no_grad():
                for p, m in zip(g["params"], g["masters"]):
                    p.copy_(m.to(p.dtype))

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None


# ---------------------------------------------------------------------------
# model assembly


def build_model(config: TrainConfig, background=None) -> RenderModel:
    enc = EncodingConfig(l_pos=config.l_pos, l_dir=config.l_dir)
    dtype = config.dtype
    seed = config.seed
    none = config.fusion_mode == "none"
    fused_dim = 0 if none else 64
    extractor = None if none else FeatureExtractor(seed=seed * 10 + 1, dtype=dtype)
    fusion_c = None if none else FusionNetwork(seed=seed * 10 + 2, heads=config.heads,
                                               ff_dim=config.ff_dim, dtype=dtype)
    fusion_f = None if none else FusionNetwork(seed=seed * 10 + 3, heads=config.heads,
                                               ff_dim=config.ff_dim, dtype=dtype)
    field_c = FieldNetwork(enc=enc, fused_dim=fused_dim, seed=seed * 10 + 4, dtype=dtype)
    field_f = FieldNetwork(enc=enc, fused_dim=fused_dim, seed=seed * 10 + 5, dtype=dtype)
    opts = RenderOptions(n_coarse=config.n_coarse, n_fine=config.n_fine,
                         fusion_mode=config.fusion_mode,
                         background=background if config.use_background else None)
    return RenderModel(extractor=extractor, fusion_coarse=fusion_c,
                       fusion_fine=fusion_f, field_coarse=field_c,
                       field_fine=field_f, options=opts)


def make_optimizer(model: RenderModel, config: TrainConfig) -> TwoGroupAdam:
    extractor_params, rest = model.parameter_groups()
    groups = []
    if extractor_params:
        groups.append(("extractor", extractor_params, config.lr_extractor))
    groups.append(("field_fusion", rest, config.lr_field_fusion))
    return TwoGroupAdam(groups)


def lr_scale(config: TrainConfig, iteration: int) -> float:
    """Exponential decay to `lr_decay_to` over the configured run length."""
    frac = iteration / max(config.iterations, 1)
    return config.lr_decay_to ** frac


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, model: RenderModel, optimizer: TwoGroupAdam,
                    config: TrainConfig, iteration: int, fingerprint: str):
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "iteration": iteration,
        "fingerprint": fingerprint,
        "groups": [],
    }
    blobs = []
    for g in optimizer.groups:
        step = g["state"]["step"] if g["state"] else 0
        entry = {"name": g["name"], "step": step, "params": []}
        for i, m in enumerate(g["masters"]):
            entry["params"].append({"shape": list(m.shape),
                                    "dtype": str(m.dtype).split(".")[-1]})
            blobs.append(m.detach().numpy().tobytes())
            if g["state"]:
                blobs.append(g["state"]["m"][i].detach().numpy().tobytes())
                blobs.append(g["state"]["v"][i].detach().numpy().tobytes())
            else:
                zero = torch.zeros_like(m).numpy().tobytes()
                blobs.append(zero)
                blobs.append(zero)
        header["groups"].append(entry)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str, background=None):
    """Rebuild (model, optimizer, config, iteration, fingerprint) from disk."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise TrainError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise TrainError(f"unsupported checkpoint version {header['version']}")
        config = TrainConfig.from_dict(header["config"])
        model = build_model(config, background=background)
        optimizer = make_optimizer(model, config)
        by_name = {g["name"]: g for g in optimizer.groups}
        for gh in header["groups"]:
            g = by_name[gh["name"]]
            state = {"step": gh["step"], "m": [], "v": []}
            for i, ph in enumerate(gh["params"]):
                np_dtype = {"float32": np.float32, "float64": np.float64}[ph["dtype"]]
                count = int(np.prod(ph["shape"])) if ph["shape"] else 1
                nbytes = count * np.dtype(np_dtype).itemsize
                def read_tensor():
                    arr = np.frombuffer(f.read(nbytes), dtype=np_dtype).reshape(ph["shape"])
                    return torch.from_numpy(arr.copy())
                master = read_tensor()
                state["m"].append(read_tensor())
                state["v"].append(read_tensor())
                g["masters"][i] = master
                with torch.no_grad():
                    g["params"][i].copy_(master.to(g["params"][i].dtype))
            g["state"] = state
    return model, optimizer, config, header["iteration"], header["fingerprint"]


def checkpoint_hash(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# ---------------------------------------------------------------------------
# metrics


def psnr(img: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) for [0,1] images; identical images capped at 100 dB."""
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise TrainError(f"psnr shape mismatch: {img.shape} vs {gt.shape}")
    mse = float(np.mean((img - gt) ** 2))
    if mse == 0.0:
        return 100.0
    return min(10.0 * math.log10(1.0 / mse), 100.0)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    k = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def ssim(img: np.ndarray, gt: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1.

    Windows are 'valid' (no padding); channels are averaged.
    """
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if img.shape != gt.shape:
        raise TrainError(f"ssim shape mismatch: {img.shape} vs {gt.shape}")
    if img.ndim == 2:
        img, gt = img[..., None], gt[..., None]
    c = img.shape[-1]
    a = torch.from_numpy(img).permute(2, 0, 1).unsqueeze(0)
    b = torch.from_numpy(gt).permute(2, 0, 1).unsqueeze(0)
    k = _gaussian_kernel(window, sigma)
    kx = k.view(1, 1, 1, -1).expand(c, 1, 1, window)
    ky = k.view(1, 1, -1, 1).expand(c, 1, window, 1)

    def blur(x):
        return F.conv2d(F.conv2d(x, kx, groups=c), ky, groups=c)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    c1, c2 = k1 ** 2, k2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


@dataclass
class MetricsReport:
    rows: list  # per-view dicts: {"index", "psnr", "ssim"}
    mean_psnr: float
    mean_ssim: float
    wall_seconds: float
    config_id: str

    def to_dict(self) -> dict:
        return {"rows": self.rows, "mean_psnr": self.mean_psnr,
                "mean_ssim": self.mean_ssim, "wall_seconds": self.wall_seconds,
                "config_id": self.config_id}


# ---------------------------------------------------------------------------
# rendering helpers shared by train / eval / serve


def ray_t_ranges(origins: np.ndarray, dirs: np.ndarray, bounds: np.ndarray,
                 margin: float = 0.05):
    """Per-ray [t0, t1] from intersecting the (expanded) scene bounds box.

    Rays that miss the box get a thin segment at their closest approach to
    the box center, so downstream sampling stays well-defined.
    """
    lo = bounds[0] - margin
    hi = bounds[1] + margin
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (lo[None] - origins) * inv
    t1 = (hi[None] - origins) * inv
    tmin = np.where(np.isfinite(t0), np.minimum(t0, t1), -np.inf).max(axis=1)
    tmax = np.where(np.isfinite(t1), np.maximum(t0, t1), np.inf).min(axis=1)
    tmin = np.maximum(tmin, 1e-4)
    miss = tmax <= tmin
    if miss.any():
        center = (bounds[0] + bounds[1]) / 2
        tc = np.maximum(((center[None] - origins) * dirs).sum(axis=1), 0.05)
        tmin = np.where(miss, tc - 0.02, tmin)
        tmax = np.where(miss, tc + 0.02, tmax)
    return tmin, tmax


def select_training_sources(dataset: LoadedDataset, target_index: int,
                            config: TrainConfig, cache: dict | None = None):
    """Indices (into dataset.frames) of the V sources for a train target."""
    if cache is not None and target_index in cache:
        return cache[target_index]
    pool = [dataset.frames[i] for i in dataset.train_indices]
    exclude = (dataset.train_indices.index(target_index)
               if target_index in dataset.train_indices else None)
    rings = len({f.altitude_tag for f in pool}) if config.stratified_selection else None
    src = select_sources(dataset.frames[target_index].pose, pool, v=config.v,
                         exclude=exclude, stratified_rings=rings)
    result = [dataset.train_indices[i] for i in src.indices]
    if cache is not None:
        cache[target_index] = result
    return result


def make_bundle(dataset: LoadedDataset, source_indices, model: RenderModel,
                precomputed_maps: dict | None = None) -> SourceBundle | None:
    if model.options.fusion_mode == "none":
        return None
    frames = [dataset.frames[i] for i in source_indices]
    dtype = model.dtype
    images = torch.stack([torch.as_tensor(f.image, dtype=dtype).permute(2, 0, 1)
                          for f in frames])
    if precomputed_maps is not None:
        maps = torch.stack([precomputed_maps[i] for i in source_indices])
    else:
        maps = model.extractor(images)
    rot = torch.stack([torch.as_tensor(f.pose.rotation, dtype=dtype) for f in frames])
    cen = torch.stack([torch.as_tensor(f.pose.translation, dtype=dtype) for f in frames])
    return SourceBundle(images, maps, rot, cen, frames[0].intrinsics)


def render_view(model: RenderModel, dataset: LoadedDataset, pose, intr=None,
                config: TrainConfig | None = None, chunk: int = 512,
                n_coarse: int | None = None, n_fine: int | None = None) -> np.ndarray:
    """Deterministic full-frame eval render; returns (H, W, 3) in [0, 1]."""
    intr = intr or dataset.intrinsics
    cfg = config or TrainConfig()
    opts = model.options
    saved = (opts.n_coarse, opts.n_fine)
    if n_coarse:
        opts.n_coarse = n_coarse
    if n_fine:
        opts.n_fine = n_fine
    try:
        pool = [dataset.frames[i] for i in dataset.train_indices]
        bundle = None
        if opts.fusion_mode != "none":
            v = min(cfg.v, len(pool))
            src = select_sources(pose, pool, v=v)
            indices = [dataset.train_indices[i] for i in src.indices]
            with torch.no_grad():
                bundle = make_bundle(dataset, indices, model)
        dirs = pixel_directions(intr, pose).reshape(-1, 3)
        origins = np.tile(pose.translation, (dirs.shape[0], 1))
        t0, t1 = ray_t_ranges(origins, dirs, dataset.bounds)
        out = np.empty((dirs.shape[0], 3))
        with torch.no_grad():
            for s in range(0, dirs.shape[0], chunk):
                e = min(s + chunk, dirs.shape[0])
                res = render_rays(model, origins[s:e], dirs[s:e], t0[s:e], t1[s:e],
                                  bundle, mode="eval", seed=0,
                                  ray_ids=np.arange(s, e))
                out[s:e] = res["fine_color"].double().numpy()
        return np.clip(out.reshape(intr.height, intr.width, 3), 0.0, 1.0)
    finally:
        opts.n_coarse, opts.n_fine = saved


def evaluate(model: RenderModel, dataset: LoadedDataset, config: TrainConfig,
             split: str = "test") -> MetricsReport:
    """Render every frame of `split` deterministically and aggregate metrics."""
    indices = dataset.test_indices if split == "test" else dataset.train_indices
    rows = []
    start = time.time()
    for i in indices:
        frame = dataset.frames[i]
        img = render_view(model, dataset, frame.pose, config=config)
        rows.append({"index": i, "psnr": psnr(img, frame.image),
                     "ssim": ssim(img, frame.image)})
    return MetricsReport(
        rows=rows,
        mean_psnr=float(np.mean([r["psnr"] for r in rows])),
        mean_ssim=float(np.mean([r["ssim"] for r in rows])),
        wall_seconds=time.time() - start,
        config_id=config.config_id())


# ---------------------------------------------------------------------------
# training


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(
        key=np.array([seed & 0xFFFFFFFFFFFFFFFF,
                      (1 << 63) | iteration], dtype=np.uint64)))


def train(dataset: LoadedDataset, config: TrainConfig, out_dir: str | None = None,
          log_cb=None, progress_cb=None):
    """Run the optimization loop; returns (model, optimizer, history).

    history rows: dicts with iteration, loss, lrs and optional eval metrics.
    When `out_dir` is given, writes metrics.csv, checkpoints and a final
    checkpoint `final.ckpt`.
    """
    if config.fusion_mode != "none" and len(dataset.train_indices) < config.v + 1:
        raise TrainError(f"need at least V+1={config.v + 1} training frames, "
                         f"have {len(dataset.train_indices)}")
    background = dataset.sky_color if config.use_background else None
    model = build_model(config, background=background)
    optimizer = make_optimizer(model, config)

    train_idx = list(dataset.train_indices)
    views_per_iter = min(config.views_per_iter, len(train_idx))
    rays_per_view = max(config.rays_per_batch // views_per_iter, 1)
    total_rays = views_per_iter * rays_per_view

    # static per-frame geometry
    dir_grids = {}
    for i in train_idx:
        f = dataset.frames[i]
        dir_grids[i] = pixel_directions(f.intrinsics, f.pose).reshape(-1, 3)
    selection_cache: dict = {}

    history = []
    csv_file = None
    writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(["iteration", "loss", "lr_extractor", "lr_field_fusion",
                         "psnr_eval", "ssim_eval", "wall_seconds"])
    start = time.time()

    dtype = config.dtype
    try:
        for it in range(config.iterations):
            rng = _iteration_rng(config.seed, it)
            views = rng.choice(len(train_idx), size=views_per_iter,
                               replace=False)
            scale = lr_scale(config, it)
            optimizer.zero_grad()
            loss_value = 0.0
            ray_base = it * total_rays
            for slot, vi in enumerate(views):
                frame_index = train_idx[int(vi)]
                frame = dataset.frames[frame_index]
                n_pix = frame.image.shape[0] * frame.image.shape[1]
                pixels = rng.choice(n_pix, size=rays_per_view, replace=False)
                dirs = dir_grids[frame_index][pixels]
                origins = np.tile(frame.pose.translation, (rays_per_view, 1))
                gt = frame.image.reshape(-1, 3)[pixels]
                t0, t1 = ray_t_ranges(origins, dirs, dataset.bounds)

                bundle = None
                if config.fusion_mode != "none":
                    src = select_training_sources(dataset, frame_index, config,
                                                  selection_cache)
                    bundle = make_bundle(dataset, src, model)

                ids = ray_base + slot * rays_per_view + np.arange(rays_per_view)
                for s in range(0, rays_per_view, config.micro_rays):
                    e = min(s + config.micro_rays, rays_per_view)
                    res = render_rays(model, origins[s:e], dirs[s:e],
                                      t0[s:e], t1[s:e], bundle, "train",
                                      config.seed, ids[s:e])
                    gt_t = torch.as_tensor(gt[s:e], dtype=dtype)
                    chunk_loss = batch_loss(res["coarse_color"], res["fine_color"],
                                            gt_t, reduction="sum")
                    if config.loss_reduction == "mean":
                        chunk_loss = chunk_loss / total_rays
                    chunk_loss.backward()
                    loss_value += float(chunk_loss.detach())

            if not math.isfinite(loss_value):
                raise TrainError(f"non-finite loss at iteration {it}")
            optimizer.step(lr_scale=scale)

            row = {"iteration": it, "loss": loss_value,
                   "lr_extractor": config.lr_extractor * scale,
                   "lr_field_fusion": config.lr_field_fusion * scale,
                   "psnr_eval": "", "ssim_eval": ""}
            do_eval = (config.eval_every and (it + 1) % config.eval_every == 0)
            if do_eval:
                report = evaluate(model, dataset, config)
                row["psnr_eval"] = report.mean_psnr
                row["ssim_eval"] = report.mean_ssim
            history.append(row)
            if writer:
                writer.writerow([row["iteration"], row["loss"],
                                 row["lr_extractor"], row["lr_field_fusion"],
                                 row["psnr_eval"], row["ssim_eval"],
                                 round(time.time() - start, 3)])
                csv_file.flush()
            if log_cb:
                log_cb(row)
            if progress_cb:
                progress_cb(it, config.iterations)
            if (out_dir and config.checkpoint_every
                    and (it + 1) % config.checkpoint_every == 0):
                save_checkpoint(os.path.join(out_dir, f"iter{it + 1:07d}.ckpt"),
                                model, optimizer, config, it + 1,
                                dataset.fingerprint)
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "final.ckpt"), model,
                            optimizer, config, config.iterations,
                            dataset.fingerprint)
    finally:
        if csv_file:
            csv_file.close()
    return model, optimizer, history


# ---------------------------------------------------------------------------
# ablation


def ablation_run(dataset: LoadedDataset, base_config: TrainConfig,
                 modes=("attention", "max", "avg", "none"),
                 v_sweep=(), out_dir: str | None = None) -> dict:
    """Train each fusion mode (and optionally a V sweep) under one budget."""
    table = {"modes": [], "v_sweep": []}
    for mode in modes:
        cfg_dict = base_config.to_dict()
        cfg_dict["fusion_mode"] = mode
        cfg = TrainConfig.from_dict(cfg_dict)
        run_dir = os.path.join(out_dir, f"mode_{mode}") if out_dir else None
        start = time.time()
        model, _, _ = train(dataset, cfg, out_dir=run_dir)
        report = evaluate(model, dataset, cfg)
        table["modes"].append({"mode": mode, "psnr": report.mean_psnr,
                               "ssim": report.mean_ssim,
                               "wall_seconds": time.time() - start})
    for v in v_sweep:
        cfg_dict = base_config.to_dict()
        cfg_dict["v"] = int(v)
        cfg = TrainConfig.from_dict(cfg_dict)
        run_dir = os.path.join(out_dir, f"v_{v}") if out_dir else None
        start = time.time()
        model, _, _ = train(dataset, cfg, out_dir=run_dir)
        report = evaluate(model, dataset, cfg)
        table["v_sweep"].append({"v": int(v), "psnr": report.mean_psnr,
                                 "ssim": report.mean_ssim,
                                 "wall_seconds": time.time() - start})
    if out_dir:
        with open(os.path.join(out_dir, "ablation.json"), "w") as f:
            json.dump(table, f, indent=1)
    return table
