"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or format
error, 4 numerical failure during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import stream as bs
from .gaussians import Camera, load_cameras, load_raw_frame, save_raw_frame
from .images import read_ppm, write_ppm
from .metrics import RdPoint, psnr, rd_report, ssim
from .pipeline import DEFAULT_LAMBDAS, StreamDecoder, StreamEncoder, TrainConfig, decode_stream
from .render import render_image
from .synth import (
    MOTION_KINDS,
    TEST_VIEW,
    frame_dir,
    load_views,
    perturbed,
    random_init,
    synth_scene,
    write_scene,
)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

log = logging.getLogger("fourdgc")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def build_config(args, **overrides) -> TrainConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    if "seed" not in values and os.environ.get("FOURDGC_SEED"):
        values["seed"] = os.environ["FOURDGC_SEED"]
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def config_help() -> str:
    lines = ["configuration keys (config file or --set key=value) and defaults:"]
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        lines.append(f"  {f.name} = {default}")
    return "\n".join(lines)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--seed", type=int, help="random seed (falls back to FOURDGC_SEED, then 0)")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _train_cameras(cameras) -> list[Camera]:
    return [c for c in cameras if c.name != TEST_VIEW]


def _eval_cameras(cameras) -> list[Camera]:
    test = [c for c in cameras if c.name == TEST_VIEW]
    return test or list(cameras)


def _pick_camera(cameras, name: str | None) -> Camera:
    if name is None:
        return cameras[0]
    for c in cameras:
        if c.name == name:
            return c
    raise UsageError(f"no camera named {name!r}")


def _state_path(args) -> Path:
    return Path(args.state) if args.state else Path(str(args.out) + ".state.npz")


def _write_atomic(path: Path, frames) -> int:
    tmp = path.with_name(path.name + ".tmp")
    n = bs.write_stream(frames, tmp)
    tmp.replace(path)
    return n


def _decode_upto(path, frame_index: int | None):
    frames = bs.read_stream(path)
    if not frames:
        raise bs.StreamFormatError(f"{path} holds no frames")
    dec = StreamDecoder()
    out = None
    for f in frames:
        out = dec.feed(f)
        if frame_index is not None and f.frame_index == frame_index:
            return out
    if frame_index is not None:
        raise UsageError(f"frame {frame_index} is not in the stream")
    return out


def _load_frame(path, frame_index: int | None):
    if str(path).endswith(".4dgs"):
        return load_raw_frame(path, frame_index or 1)
    return _decode_upto(path, frame_index)


def _frame_metrics(frame, cameras, truth_dir: Path, background) -> tuple[float, float]:
    ps, ss = [], []
    for cam in cameras:
        img = render_image(frame, cam, background)
        truth = read_ppm(truth_dir / f"{cam.name}.ppm")
        ps.append(psnr(img, truth))
        ss.append(ssim(img, truth))
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    scene = synth_scene(args.seed if args.seed is not None else int(os.environ.get("FOURDGC_SEED", 0)),
                        args.frames, args.gaussians, args.views, args.motion, args.sh_degree,
                        args.width, args.height)
    write_scene(scene, args.out)
    print(f"wrote {len(scene.frames)} frames x {len(scene.cameras) + 1} views to {args.out}")
    return 0


def cmd_keyframe(args) -> int:
    cfg = build_config(args, lambda1=args.lambda1)
    cameras = load_cameras(args.cameras)
    views, _ = load_views(args.images, _train_cameras(cameras))
    if args.init:
        init = perturbed(load_raw_frame(args.init), cfg.seed, args.init_noise)
    elif (Path(args.images) / "truth.4dgs").exists():
        init = perturbed(load_raw_frame(Path(args.images) / "truth.4dgs"), cfg.seed, args.init_noise)
    else:
        init = random_init([v.camera for v in views], args.points, cfg.seed, cfg.sh_degree)
    if init.sh_degree != cfg.sh_degree:
        raise UsageError(f"initial frame has SH degree {init.sh_degree}, config says {cfg.sh_degree}")
    enc = StreamEncoder(cfg)
    enc.encode_keyframe(views, init)
    out = Path(args.out)
    n = _write_atomic(out, enc.frames)
    enc.save_state(_state_path(args))
    r = enc.reports[0]
    print(f"frame 1: {n} bytes, {r.n_primitives} primitives, psnr {r.psnr:.3f} dB (training views)")
    return 0


def cmd_stream(args) -> int:
    path = Path(args.inp)
    frames = bs.read_stream(path)
    state = Path(args.prev_state) if args.prev_state else Path(str(path) + ".state.npz")
    enc = StreamEncoder.load_state(state, frames)
    if args.config or args.set or args.seed is not None:
        log.warning("configuration is fixed by the keyframe; --config/--set/--seed are ignored")
    cameras = _train_cameras(load_cameras(args.cameras))
    for d in args.frames:
        views, _ = load_views(d, cameras)
        enc.encode_frame(views)
        _write_atomic(path, enc.frames)
        enc.save_state(state)
        r = enc.reports[-1]
        print(f"frame {r.frame_index}: {r.byte_size} bytes, {r.n_primitives} primitives "
              f"(+{r.n_compensated}), psnr {r.psnr:.3f} dB (training views)")
    return 0


def cmd_decode(args) -> int:
    frame = _decode_upto(args.inp, args.frame)
    save_raw_frame(args.out, frame)
    print(f"frame {frame.frame_index}: {len(frame)} primitives -> {args.out}")
    return 0


def cmd_render(args) -> int:
    frame = _load_frame(args.inp, args.frame)
    cam = _pick_camera(load_cameras(args.camera), args.view)
    img = render_image(frame, cam, tuple(args.background))
    write_ppm(args.out, img)
    if args.truth:
        truth = read_ppm(args.truth)
        print(f"psnr {psnr(img, truth):.9f} ssim {ssim(img, truth):.9f}")
    return 0


def cmd_eval(args) -> int:
    root = Path(args.truth)
    cameras = _eval_cameras(load_cameras(args.cameras or root / "cameras.json"))
    frames = bs.read_stream(args.stream)
    decoded = decode_stream(frames)
    sizes = bs.frame_sizes(frames)
    print("frame,bits,psnr_db,ssim")
    rows = []
    for f, rec, size in zip(frames, decoded, sizes):
        p, s = _frame_metrics(rec, cameras, frame_dir(root, f.frame_index), tuple(args.background))
        rows.append((size * 8, p, s))
        print(f"{f.frame_index},{size * 8},{p:.9f},{s:.9f}")
    bits, ps, ss = (np.mean(c) for c in zip(*rows))
    print(f"mean,{bits:.1f},{ps:.9f},{ss:.9f}")
    return 0


def run_sweep(root: Path, lambdas, base: TrainConfig, n_frames: int | None, out_dir: Path):
    """Encode the scene once per lambda1; returns RD points and per-lambda encoders."""
    from .synth import scene_cameras

    cameras = scene_cameras(root)
    train_cams, eval_cams = _train_cameras(cameras), _eval_cameras(cameras)
    dirs = sorted(p for p in root.glob("frame_*") if p.is_dir())
    if n_frames:
        dirs = dirs[:n_frames]
    if len(dirs) < 1:
        raise FileNotFoundError(f"no frame directories under {root}")
    points = []
    for lam in lambdas:
        cfg = dataclasses.replace(base, lambda1=lam)
        views = [load_views(d, train_cams)[0] for d in dirs]
        truth = dirs[0] / "truth.4dgs"
        if truth.exists():
            init = perturbed(load_raw_frame(truth), cfg.seed)
        else:
            init = random_init(train_cams, 16, cfg.seed, cfg.sh_degree)
        enc = StreamEncoder(cfg)
        enc.encode_keyframe(views[0], init)
        for v in views[1:]:
            enc.encode_frame(v)
        path = out_dir / f"stream_lambda{lam:g}.4dgc"
        total = bs.write_stream(enc.frames, path)
        decoded = decode_stream(bs.read_stream(path))
        metrics = [_frame_metrics(rec, eval_cams, d, cfg.background) for rec, d in zip(decoded, dirs)]
        p = float(np.mean([m[0] for m in metrics]))
        s = float(np.mean([m[1] for m in metrics]))
        points.append(RdPoint(total * 8 / len(dirs), p, s, lam))
        print(f"lambda1 {lam:g}: {total * 8 / len(dirs):.1f} bits/frame, psnr {p:.4f} dB, ssim {s:.6f}")
    return points


def cmd_rdcurve(args) -> int:
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --lambdas: {args.lambdas}") from exc
    if not lambdas:
        raise UsageError("--lambdas is empty")
    base = build_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    points = run_sweep(Path(args.scene), lambdas, base, args.frames, out.parent)
    csv_path, fit_path = rd_report({args.label: points}, out)
    print(f"wrote {csv_path} and {fit_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fourdgc",
        description="Rate-distortion optimised codec for dynamic Gaussian scenes.",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-view scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--gaussians", type=int, default=8)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--motion", choices=MOTION_KINDS, default="mixed")
    p.add_argument("--sh-degree", type=int, default=1)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("keyframe", help="train and encode frame 1 into a new stream")
    p.add_argument("--images", required=True, help="frame directory with <camera>.ppm files")
    p.add_argument("--cameras", required=True)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--out", required=True, help="output .4dgc stream")
    p.add_argument("--state", help="encoder state file (default: <out>.state.npz)")
    p.add_argument("--init", help=".4dgs starting point (default: truth.4dgs beside the images, else random)")
    p.add_argument("--init-noise", type=float, default=0.03)
    p.add_argument("--points", type=int, default=16, help="random starting primitives")
    _add_config_flags(p)
    p.set_defaults(func=cmd_keyframe)

    p = sub.add_parser("stream", help="encode further frames and append them to a stream")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--prev-state", help="encoder state file (default: <in>.state.npz)")
    p.add_argument("--frames", nargs="+", required=True, help="frame directories in order")
    p.add_argument("--cameras", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("decode", help="decode a stream up to one frame and write it as .4dgs")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("render", help="render a decoded frame to PPM")
    p.add_argument("--in", dest="inp", required=True, help=".4dgc stream or .4dgs frame")
    p.add_argument("--frame", type=int, help="frame index (streams; default: last)")
    p.add_argument("--camera", required=True, help="camera JSON file")
    p.add_argument("--view", help="camera name (default: first)")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="reference PPM; prints PSNR and SSIM")
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="per-frame quality and size of a stream")
    p.add_argument("--stream", required=True)
    p.add_argument("--truth", required=True, help="scene directory with frame_XXXX folders")
    p.add_argument("--cameras", help="camera JSON (default: <truth>/cameras.json)")
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rdcurve", help="lambda1 sweep and RD report")
    p.add_argument("--scene", required=True)
    p.add_argument("--lambdas", default=",".join(f"{v:g}" for v in DEFAULT_LAMBDAS))
    p.add_argument("--frames", type=int, help="use only the first N frames")
    p.add_argument("--out", default="rd")
    p.add_argument("--label", default="4dgc")
    _add_config_flags(p)
    p.set_defaults(func=cmd_rdcurve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        seed = getattr(args, "seed", None)
        print(f"numerical failure: {exc} (seed flag: {seed})", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, bs.StreamFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
