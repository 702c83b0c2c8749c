"""Command-line entry points and the render service used by the viewer.

The offline `render` subcommand and the HTTP/WebSocket service share one
request path, so a service render of a pose is byte-identical to the CLI
render of the same pose.
"""

from __future__ import annotations

import argparse
import asyncio
import io
import json
import struct
import sys
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse, Response

from . import __version__
from .geometry import CameraIntrinsics, GeometryError, Pose
from .scenedata import (
    default_intrinsics,
    default_rings,
    default_scene,
    generate_dataset,
    load_manifest,
)
from .selection import select_sources
from .trainkit import (
    TrainConfig,
    ablation_run,
    benchmark_config,
    checkpoint_hash,
    evaluate,
    load_checkpoint,
    render_view,
    train,
)

ERROR_PREFIX = "error:"

DEFAULT_MAX_SIZE = 256


class RequestError(ValueError):
    pass


def parse_pose(values, tol: float = 1e-3) -> Pose:
    """16 row-major numbers (camera-to-world 4x4) to a validated Pose.

    The rotation block must be orthonormal within `tol`; it is then snapped
    to the nearest rotation so downstream code sees an exact one.
    """
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size != 16:
        raise RequestError(f"pose must have 16 numbers, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise RequestError("pose contains non-finite values")
    m = arr.reshape(4, 4)
    r = m[:3, :3]
    if np.abs(r.T @ r - np.eye(3)).max() > tol or np.linalg.det(r) < 0:
        raise RequestError(
            "pose rotation block violates the orthonormality invariant "
            f"(tolerance {tol})")
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return Pose(rotation=r, translation=m[:3, 3].copy())


@dataclass(frozen=True)
class RenderRequest:
    pose: Pose
    width: int
    height: int
    quality: str = "full"  # full | preview
    n_coarse: int | None = None
    n_fine: int | None = None

    def __post_init__(self):
        if self.quality not in ("full", "preview"):
            raise RequestError(f"quality must be 'full' or 'preview', "
                               f"got {self.quality!r}")
        if self.width < 1 or self.height < 1:
            raise RequestError("width and height must be positive")

    @staticmethod
    def from_dict(d: dict, default_size: int) -> "RenderRequest":
        if "pose" not in d:
            raise RequestError("request is missing 'pose'")
        samples = d.get("samples") or {}
        return RenderRequest(
            pose=parse_pose(d["pose"]),
            width=int(d.get("width", default_size)),
            height=int(d.get("height", default_size)),
            quality=d.get("quality", "full"),
            n_coarse=samples.get("n_coarse"),
            n_fine=samples.get("n_fine"))


def request_intrinsics(base: CameraIntrinsics, width: int, height: int) -> CameraIntrinsics:
    """Rescale the dataset camera to the requested resolution (same FOV)."""
    return CameraIntrinsics(
        fx=base.fx * width / base.width, fy=base.fy * height / base.height,
        cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height)


def render_request_image(model, dataset, config: TrainConfig,
                         req: RenderRequest) -> np.ndarray:
    nc = req.n_coarse or config.n_coarse
    nf = req.n_fine or config.n_fine
    if req.quality == "preview":
        nc, nf = max(nc // 2, 1), max(nf // 2, 1)
    intr = request_intrinsics(dataset.intrinsics, req.width, req.height)
    return render_view(model, dataset, req.pose, intr=intr, config=config,
                       n_coarse=nc, n_fine=nf)


def encode_png(img: np.ndarray) -> bytes:
    from PIL import Image
    data = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data).save(buf, format="PNG")
    return buf.getvalue()


def encode_jpeg(img: np.ndarray, quality: int = 85) -> bytes:
    from PIL import Image
    data = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data).save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# CLI


def _load_pose_file(path: str) -> Pose:
    with open(path) as f:
        payload = json.load(f)
    if isinstance(payload, dict):
        payload = payload["pose"]
    return parse_pose(payload)


def _config_from_args(args) -> TrainConfig:
    base = {}
    if getattr(args, "preset", None) == "benchmark":
        base = benchmark_config().to_dict()
    if getattr(args, "config", None):
        with open(args.config) as f:
            base.update(json.load(f))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise RequestError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            base[key] = json.loads(raw)
        except json.JSONDecodeError:
            base[key] = raw
    if getattr(args, "seed", None) is not None:
        base["seed"] = args.seed
    return TrainConfig.from_dict(base)


def _cmd_scenegen(args) -> int:
    intr = default_intrinsics(args.size)
    rings = default_rings(args.frames_per_ring)
    if args.rings:
        rings = []
        for part in args.rings.split(";"):
            radius, elev, count = part.split(",")
            rings.append((float(radius), float(elev), int(count)))
    path = generate_dataset(default_scene(), rings, intr, args.out,
                            seed=args.seed, test_every=args.test_every)
    print(json.dumps({"manifest": path}))
    return 0


def _cmd_train(args) -> int:
    config = _config_from_args(args)
    dataset = load_manifest(args.data)
    every = max(args.log_every, 1)

    def log(row):
        if row["iteration"] % every == 0 or row["psnr_eval"] != "":
            print(f"iter {row['iteration']} loss {row['loss']:.6f}"
                  + (f" psnr {row['psnr_eval']:.3f}" if row["psnr_eval"] != "" else ""),
                  flush=True)

    train(dataset, config, out_dir=args.out, log_cb=log)
    print(json.dumps({"checkpoint": f"{args.out}/final.ckpt",
                      "hash": checkpoint_hash(f"{args.out}/final.ckpt")}))
    return 0


def _cmd_eval(args) -> int:
    dataset = load_manifest(args.data)
    model, _, config, iteration, fingerprint = load_checkpoint(
        args.checkpoint, background=dataset.sky_color)
    if fingerprint != dataset.fingerprint:
        raise RequestError(f"checkpoint was trained on fingerprint {fingerprint}, "
                           f"dataset has {dataset.fingerprint}")
    report = evaluate(model, dataset, config, split=args.split)
    print(json.dumps({"iteration": iteration, **report.to_dict()}))
    return 0


def _cmd_ablate(args) -> int:
    dataset = load_manifest(args.data)
    config = _config_from_args(args)
    modes = tuple(args.modes.split(",")) if args.modes else ("attention", "max", "avg", "none")
    sweep = tuple(int(v) for v in args.v_sweep.split(",")) if args.v_sweep else ()
    table = ablation_run(dataset, config, modes=modes, v_sweep=sweep,
                         out_dir=args.out)
    print(json.dumps(table))
    return 0


def _cmd_render(args) -> int:
    dataset = load_manifest(args.data)
    model, _, config, _, fingerprint = load_checkpoint(
        args.checkpoint, background=dataset.sky_color)
    if args.frame is not None:
        pose = dataset.frames[args.frame].pose
    else:
        pose = _load_pose_file(args.pose)
    req = RenderRequest(pose=pose, width=args.width or dataset.intrinsics.width,
                        height=args.height or dataset.intrinsics.height,
                        quality=args.quality)
    png = encode_png(render_request_image(model, dataset, config, req))
    with open(args.out, "wb") as f:
        f.write(png)
    print(json.dumps({"out": args.out, "bytes": len(png)}))
    return 0


def _cmd_sources(args) -> int:
    dataset = load_manifest(args.data)
    pose = _load_pose_file(args.pose)
    pool = [dataset.frames[i] for i in dataset.train_indices]
    result = select_sources(pose, pool, v=args.v, exclude=args.exclude)
    print(json.dumps({
        "indices": [dataset.train_indices[i] for i in result.indices],
        "distances": list(result.distances)}))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn
    app = create_app(args.checkpoint, args.data, max_size=args.max_size)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aerofield")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sg = sub.add_parser("scenegen", help="generate a synthetic multi-ring dataset")
    sg.add_argument("--out", required=True)
    sg.add_argument("--size", type=int, default=64)
    sg.add_argument("--frames-per-ring", type=int, default=15)
    sg.add_argument("--rings", help="radius,elev,count;... (overrides defaults)")
    sg.add_argument("--test-every", type=int, default=5)
    sg.add_argument("--seed", type=int, default=42)
    sg.set_defaults(func=_cmd_scenegen)

    tr = sub.add_parser("train", help="train a model from a dataset manifest")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", help="JSON config file")
    tr.add_argument("--preset", choices=["benchmark"])
    tr.add_argument("--set", action="append", metavar="KEY=VALUE")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--log-every", type=int, default=100)
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=["test", "train"])
    ev.set_defaults(func=_cmd_eval)

    ab = sub.add_parser("ablate", help="fusion-mode and source-count sweep")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out")
    ab.add_argument("--config")
    ab.add_argument("--preset", choices=["benchmark"])
    ab.add_argument("--set", action="append", metavar="KEY=VALUE")
    ab.add_argument("--seed", type=int)
    ab.add_argument("--modes")
    ab.add_argument("--v-sweep")
    ab.set_defaults(func=_cmd_ablate)

    rd = sub.add_parser("render", help="render one pose from a checkpoint")
    rd.add_argument("--checkpoint", required=True)
    rd.add_argument("--data", required=True)
    rd.add_argument("--pose", help="JSON file with 16 row-major numbers")
    rd.add_argument("--frame", type=int, help="render a dataset frame's pose")
    rd.add_argument("--out", required=True)
    rd.add_argument("--width", type=int)
    rd.add_argument("--height", type=int)
    rd.add_argument("--quality", default="full", choices=["full", "preview"])
    rd.set_defaults(func=_cmd_render)

    so = sub.add_parser("sources", help="list selected source views for a pose")
    so.add_argument("--data", required=True)
    so.add_argument("--pose", required=True)
    so.add_argument("--v", type=int, default=10)
    so.add_argument("--exclude", type=int)
    so.set_defaults(func=_cmd_sources)

    sv = sub.add_parser("serve", help="run the render service")
    sv.add_argument("--checkpoint", required=True)
    sv.add_argument("--data", required=True)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8472)
    sv.add_argument("--max-size", type=int, default=DEFAULT_MAX_SIZE)
    sv.set_defaults(func=_cmd_serve)
    return p


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "render" and not (args.pose or args.frame is not None):
            raise RequestError("render needs --pose or --frame")
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # all failures become one parseable line
        msg = str(exc).replace("\n", " ")
        print(f"{ERROR_PREFIX} {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())


# ---------------------------------------------------------------------------
# service


def create_app(checkpoint_path: str, manifest_path: str,
               max_size: int = DEFAULT_MAX_SIZE):
    dataset = load_manifest(manifest_path)
    model, _, config, iteration, fingerprint = load_checkpoint(
        checkpoint_path, background=dataset.sky_color)
    if fingerprint != dataset.fingerprint:
        raise RequestError(f"checkpoint fingerprint {fingerprint} does not "
                           f"match dataset {dataset.fingerprint}")
    ckpt_id = checkpoint_hash(checkpoint_path)[:16]
    radii = [float(np.linalg.norm(dataset.frames[i].pose.translation))
             for i in dataset.train_indices]
    info = {
        "version": __version__,
        "checkpoint_id": ckpt_id,
        "fingerprint": fingerprint,
        "iteration": iteration,
        "v": config.v,
        "fusion_mode": config.fusion_mode,
        "max_width": max_size,
        "max_height": max_size,
        "image_width": dataset.intrinsics.width,
        "image_height": dataset.intrinsics.height,
        "radius_min": min(radii),
        "radius_max": max(radii),
        "train_frames": len(dataset.train_indices),
        "test_frames": len(dataset.test_indices),
    }

    app = FastAPI()
    lock = asyncio.Lock()  # one render at a time per process; state is read-only

    def parse_request(payload: dict) -> RenderRequest:
        req = RenderRequest.from_dict(payload, dataset.intrinsics.width)
        if req.width > max_size or req.height > max_size:
            raise RequestError(f"requested {req.width}x{req.height} exceeds "
                               f"caps {max_size}x{max_size}")
        return req

    def do_render(req: RenderRequest) -> np.ndarray:
        return render_request_image(model, dataset, config, req)

    @app.get("/info")
    async def get_info():
        return info

    @app.post("/render")
    async def post_render(payload: dict):
        try:
            req = parse_request(payload)
        except (RequestError, GeometryError, KeyError, TypeError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)
        async with lock:
            img = await asyncio.to_thread(do_render, req)
        return Response(content=encode_png(img), media_type="image/png")

    @app.get("/sources")
    async def get_sources(pose: str, v: int | None = None,
                          exclude: int | None = None):
        try:
            target = parse_pose([float(x) for x in pose.split(",")])
        except (RequestError, ValueError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)
        pool = [dataset.frames[i] for i in dataset.train_indices]
        count = min(v if v is not None else config.v or 1, len(pool))
        try:
            result = select_sources(target, pool, v=count, exclude=exclude)
        except Exception as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)
        indices = [dataset.train_indices[i] for i in result.indices]
        return {"indices": indices,
                "distances": list(result.distances),
                "thumbnails": [f"/thumb/{i}" for i in indices]}

    @app.get("/thumb/{index}")
    async def get_thumb(index: int):
        if index < 0 or index >= len(dataset.frames):
            return JSONResponse({"error": "no such frame"}, status_code=404)
        return Response(content=encode_png(dataset.frames[index].image),
                        media_type="image/png")

    @app.websocket("/stream")
    async def stream(ws: WebSocket):
        await ws.accept()
        latest: dict = {}
        fresh = asyncio.Event()
        counter = 0

        async def reader():
            nonlocal counter
            while True:
                text = await ws.receive_text()
                counter += 1
                latest["req"] = (counter, text)
                fresh.set()

        reader_task = asyncio.create_task(reader())
        try:
            while True:
                await fresh.wait()
                fresh.clear()
                frame_id, text = latest["req"]
                try:
                    payload = json.loads(text)
                    if "id" in payload:
                        frame_id = int(payload["id"])
                    req = parse_request(payload)
                except (RequestError, GeometryError, ValueError,
                        KeyError, TypeError) as exc:
                    await ws.send_text(json.dumps({"error": str(exc),
                                                   "id": frame_id}))
                    continue
                async with lock:
                    img = await asyncio.to_thread(do_render, req)
                # a newer request supersedes this frame: drop it unanswered
                if fresh.is_set():
                    continue
                await ws.send_bytes(struct.pack(">Q", frame_id)
                                    + encode_jpeg(img))
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            reader_task.cancel()

    return app


if __name__ == "__main__":
    main()
