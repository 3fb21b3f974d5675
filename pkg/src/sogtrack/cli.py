"""Command-line entry point: keyframes, track, eval, synth, overlay."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import io
from .config import Config, apply_overrides
from .keyframes import brute_force_select, greedy_select, objective_of, random_select
from .object_sog import project_sog_arrays, to_object_sog
from .synth import SynthSpec, perturb_pose, synth_scene, write_scene
from .tracking import Trajectory, load_sequence, run_eval_files, run_tracking, write_diagnostics_csv

log = logging.getLogger("sogtrack")


def load_config(args) -> Config:
    cfg = Config.from_json(args.config) if getattr(args, "config", None) else Config()
    return apply_overrides(cfg, getattr(args, "set", None) or [])


def cmd_keyframes(args) -> dict:
    features, frames = io.read_features(args.features)
    if args.mode == "greedy":
        idx = greedy_select(features, args.K, args.lambda_div)
    elif args.mode == "brute":
        idx = brute_force_select(features, args.K, args.lambda_div)
    else:
        idx = random_select(len(features), args.K, args.seed)
    out = {"mode": args.mode, "K": args.K, "lambda_div": args.lambda_div, "indices": idx,
           "frames": [int(frames[i]) for i in idx], "objective": objective_of(features, idx, args.lambda_div)}
    if args.mode == "random":
        out["seed"] = args.seed
    io.write_json(args.out, out)
    return out


def track_one(manifest, out, cfg, diagnostics=None) -> dict:
    seq = load_sequence(manifest)

    def progress(w, s, e, res):
        log.info("window %d [%d, %d) %s", w, s, e, "failed" if isinstance(res, Exception) else
                 f"{res.trace[0]:.6g} -> {res.trace[-1]:.6g}")

    traj = run_tracking(seq, cfg, callback=progress)
    traj.diagnostics["config"] = cfg.to_dict()
    traj.write(out)
    if diagnostics:
        write_diagnostics_csv(diagnostics, traj)
    d = traj.diagnostics
    return {"trajectory": str(out), "frames": len(traj), "success": d["success"],
            "failed_windows": d["failed_windows"], "runtime_seconds": d["runtime_seconds"],
            "runtime_hours_per_100_frames": d["runtime_hours_per_100_frames"]}


def cmd_track(args) -> dict:
    cfg = load_config(args)
    if len(args.manifest) == 1:
        return track_one(args.manifest[0], args.out, cfg, args.diagnostics)
    # batch: --out is a directory; a failing sequence is recorded and the rest still run
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for i, m in enumerate(args.manifest):
        diag = Path(args.diagnostics) / f"sequence_{i:03d}.csv" if args.diagnostics else None
        try:
            r = track_one(m, out / f"sequence_{i:03d}.json", cfg, diag)
        except Exception as exc:
            log.warning("sequence %s failed: %s", m, exc)
            r = {"success": False, "error": type(exc).__name__, "message": str(exc)}
        results.append({"manifest": str(m), **r})
    report = {"sequences": results, "failed": sum(not r["success"] for r in results)}
    io.write_json(out / "batch_report.json", report)
    return report


def cmd_eval(args) -> dict:
    rep = run_eval_files(args.pred, args.gt, args.manifest, args.gt_points)
    out = rep.to_dict()
    io.write_json(args.out, out)
    return out


def cmd_synth(args) -> dict:
    spec = SynthSpec(n_frames=args.frames, shape=args.shape, n_patches=args.patches, width=args.size,
                     height=args.size, focal=args.focal, occluder_coverage=args.occluder,
                     contact=args.contact, depth_noise=args.depth_noise, seed=args.seed)
    scene = synth_scene(spec)
    init = None
    if args.perturb_rot > 0 or args.perturb_trans > 0:
        rng = np.random.default_rng(args.seed + 1)
        init = [perturb_pose(p, rng, args.perturb_rot, args.perturb_trans * scene.diameter) for p in scene.obj_poses]
    path = write_scene(scene, args.out, init)
    return {"manifest": str(path), "frames": spec.n_frames, "occlusion": scene.occlusion}


def render_overlay(image, uv, sigma, color, alpha: float = 0.5) -> Image.Image:
    """Projected object Gaussians as translucent discs of radius sigma, far to near."""
    base = Image.fromarray(np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)).convert("RGBA")
    layer = Image.new("RGBA", base.size, (0, 0, 0, 0))
    draw = ImageDraw.Draw(layer)
    a = int(round(alpha * 255))
    for (u, v), s, c in zip(uv, sigma, color):
        rgb = tuple(int(x) for x in np.clip(np.rint(np.asarray(c) * 255), 0, 255))
        draw.ellipse([u - s, v - s, u + s, v + s], fill=rgb + (a,))
    return Image.alpha_composite(base, layer).convert("RGB")


def cmd_overlay(args) -> dict:
    cfg = load_config(args)
    seq = load_sequence(args.manifest)
    traj = Trajectory.read(args.trajectory) if args.trajectory else None
    poses = traj.obj_poses if traj is not None else seq.init_obj_poses
    if len(poses) != seq.n_frames:
        raise ValueError(f"trajectory has {len(poses)} frames, sequence has {seq.n_frames}")
    o = cfg.object_sog
    sog = to_object_sog(seq.asset, o.count, o.sigma_factor, o.min_opacity)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t in range(seq.n_frames):
        keep, uv, sig, z = project_sog_arrays(sog, poses[t], seq.cams[t])
        order = np.argsort(-z, kind="stable")
        img = render_overlay(seq.images[t], uv[order], sig[order], sog.color[keep[order]], args.alpha)
        p = out / f"overlay_{t:05d}.png"
        img.save(p)
        written.append(str(p))
    return {"written": written}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sogtrack", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON file with config overrides")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted override, e.g. weights.sil=50 (repeatable)")

    p = sub.add_parser("keyframes", help="select keyframes from a feature file")
    p.add_argument("features")
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--lambda-div", type=float, default=1.0)
    p.add_argument("--mode", choices=("greedy", "brute", "random"), default="greedy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keyframes)

    p = sub.add_parser("track", help="refine object and hand poses for a sequence")
    p.add_argument("manifest", nargs="+", help="one manifest, or several for a batch run")
    p.add_argument("--out", required=True, help="trajectory file, or a directory for a batch run")
    p.add_argument("--diagnostics", help="per-iteration objective traces as CSV (a directory for a batch run)")
    with_config(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="compute metrics of a trajectory against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--manifest")
    p.add_argument("--gt-points")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic sequence with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--shape", choices=("box", "card", "blob"), default="box")
    p.add_argument("--patches", type=int, default=10)
    p.add_argument("--size", type=int, default=256, help="image width and height in pixels")
    p.add_argument("--focal", type=float, default=320.0)
    p.add_argument("--occluder", type=float, default=None, help="fraction of the object hidden by a hand disc")
    p.add_argument("--contact", action="store_true")
    p.add_argument("--depth-noise", type=float, default=0.0)
    p.add_argument("--perturb-rot", type=float, default=0.0, help="max initial rotation error, degrees")
    p.add_argument("--perturb-trans", type=float, default=0.0, help="max initial translation error, fraction of diameter")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("overlay", help="render the projected object SoG over each frame")
    p.add_argument("manifest")
    p.add_argument("--trajectory", help="defaults to the sequence's initial trajectory")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    with_config(p)
    p.set_defaults(func=cmd_overlay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}))
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
