"""Command-line entry point: ``fewshot-render <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import traceback
from pathlib import Path

import numpy as np

from . import report
from .dataset import DataError, Dataset, frame_dir, write_png_rgb
from .keyframes import KeyframeSet, default_k, select_keyframes, select_random
from .pose3d import TriangulationConfig, triangulate_sequence
from .scene_model import load_cameras, save_cameras
from .synth_rig import SceneSpec, generate_sequence, orbit_cameras
from .trainer import NonFiniteLoss, TrainConfig

log = logging.getLogger("fewshot_render")

SECTIONS = ("scene", "triangulation", "keyframes", "train", "evaluate", "study", "run")
STAGES = ("generate", "triangulate", "keyframes", "fuse", "train", "evaluate")

DEFAULTS = {
    "scene": {},
    "triangulation": {},
    "keyframes": {"k": None, "seed": 0, "method": "pose"},
    "train": {},
    "evaluate": {"split": "holdout", "stride": 1},
    "study": {"ks": [4, 8, 16], "methods": ["pose", "random"], "trials": 20, "mode": "fast"},
    "run": {"variants": ["both"], "workers": 1},
}


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------- config

def load_config(path=None) -> dict:
    """Sectioned JSON config merged over defaults."""
    cfg = {k: dict(v) for k, v in DEFAULTS.items()}
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be an object of sections")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for sec, vals in raw.items():
        if not isinstance(vals, dict):
            raise ConfigError(f"section {sec!r} must be an object")
        cfg[sec].update(vals)
    return cfg


def scene_spec(cfg: dict) -> SceneSpec:
    unknown = set(cfg["scene"]) - set(SceneSpec.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown scene settings: {sorted(unknown)}")
    spec = SceneSpec.from_dict(cfg["scene"])
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec


def tri_config(cfg: dict) -> TriangulationConfig:
    try:
        d = dict(cfg["triangulation"])
        if "surface_depth" in d and d["surface_depth"] is not None:
            d["surface_depth"] = tuple(d["surface_depth"])
        return TriangulationConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"triangulation: {exc}") from exc


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def _set(cfg, section, key, value):
    if value is not None:
        cfg[section][key] = value


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


# ----------------------------------------------------------------------------- shared steps

def poses_for(ds: Dataset, tcfg: TriangulationConfig):
    if all(ds.has_pose_est(t) for t in range(ds.n_frames)):
        return [ds.pose_est(t) for t in range(ds.n_frames)]
    return triangulate_sequence(ds, tcfg)


def do_triangulate(ds: Dataset, tcfg: TriangulationConfig) -> dict:
    poses = triangulate_sequence(ds, tcfg, write=True)
    errs = [float(np.linalg.norm(p.joints - ds.pose_gt(p.timestamp).joints, axis=1).mean())
            for p in poses]
    return {"frames": len(poses), "method": tcfg.method, "mean_joint_error": float(np.mean(errs)),
            "max_frame_error": float(np.max(errs))}


def do_keyframes(ds: Dataset, cfg: dict, tcfg: TriangulationConfig) -> KeyframeSet:
    kc = cfg["keyframes"]
    n = ds.n_frames
    k = kc.get("k") or default_k(n)
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}]")
    if kc.get("method", "pose") == "random":
        return select_random(n, k, int(kc.get("seed", 0)))
    if kc.get("method", "pose") != "pose":
        raise ConfigError("keyframes.method must be pose or random")
    return select_keyframes(poses_for(ds, tcfg), k, int(kc.get("seed", 0)))


def do_fuse(ds: Dataset, frames) -> list[dict]:
    from .proxy_geometry import fuse_frame, render_textured, save_ply

    out = []
    cams = ds.cameras
    for t in frames:
        cloud = fuse_frame(ds.frames(t), cams)
        d = frame_dir(ds.root, t)
        save_ply(d / "proxy.ply", cloud)
        for cam in cams:
            write_png_rgb(d / f"itex_view{cam.view_id}.png", render_textured(cloud, cam)[0])
        out.append({"frame": int(t), "points": len(cloud)})
    return out


def do_train(ds: Dataset, keys, tc: TrainConfig, out: Path, resume=None, steps=None):
    from .trainer import read_log, train

    ckpt = train(ds, keys, tc, out, resume=resume, until=steps)
    report.plot_losses(read_log(out / "train_log.jsonl"), out / "losses.png")
    return ckpt


def do_evaluate(ds: Dataset, checkpoints, ecfg: dict, out_json: Path) -> list[dict]:
    from .eval_metrics import evaluate_run

    rows = evaluate_run([str(c) for c in checkpoints], ds, ecfg.get("split", "holdout"),
                        int(ecfg.get("stride", 1)))
    out_json.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out_json, {"rows": rows})
    report.write_csv(out_json.with_suffix(".csv"), rows)
    report.plot_metrics(rows, out_json.with_suffix(".png"))
    return rows


# ----------------------------------------------------------------------------- commands

def cmd_generate(args, cfg):
    if args.spec:
        try:
            cfg["scene"].update(json.loads(Path(args.spec).read_text()))
        except FileNotFoundError as exc:
            raise ConfigError(f"scene spec not found: {args.spec}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scene spec is not valid JSON: {exc}") from exc
    _set(cfg, "scene", "n_frames", args.frames)
    _set(cfg, "scene", "image_size", args.size)
    _set(cfg, "scene", "seed", args.seed)
    spec = scene_spec(cfg)
    generate_sequence(spec, args.out, workers=args.workers)
    print(f"wrote {spec.n_frames} frames x {spec.n_views} views to {args.out}")


def cmd_triangulate(args, cfg):
    _set(cfg, "triangulation", "method", args.method)
    ds = Dataset(args.data)
    summary = do_triangulate(ds, tri_config(cfg))
    if args.out:
        report.write_json(args.out, summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_keyframes(args, cfg):
    _set(cfg, "keyframes", "k", args.k)
    _set(cfg, "keyframes", "seed", args.seed)
    _set(cfg, "keyframes", "method", args.method)
    ds = Dataset(args.data)
    ks = do_keyframes(ds, cfg, tri_config(cfg))
    out = Path(args.out) if args.out else ds.root / "keyframes.json"
    ks.save(out)
    print(json.dumps(ks.to_dict(), sort_keys=True))


def cmd_fuse(args, cfg):
    ds = Dataset(args.data)
    if args.frames == "keyframes":
        frames = KeyframeSet.load(ds.root / "keyframes.json").indices
    elif args.frames == "all":
        frames = range(ds.n_frames)
    else:
        frames = _int_list(args.frames)
    for row in do_fuse(ds, frames):
        print(f"frame {row['frame']}: {row['points']} points")


def cmd_train(args, cfg):
    _set(cfg, "train", "seed", args.seed)
    _set(cfg, "train", "max_steps", args.max_steps)
    tc = train_config(cfg)
    ds = Dataset(args.data)
    keys = KeyframeSet.load(args.keyframes).indices
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "config.resolved.json", cfg)
    ckpt = do_train(ds, keys, tc, out, resume=args.resume, steps=args.steps)
    print(f"checkpoint: {ckpt}")


def cmd_render(args, cfg):
    import torch

    from .proxy_geometry import fuse_frame, render_textured
    from .trainer import load_checkpoint, render_full

    if not Path(args.checkpoint).exists():
        raise DataError(f"missing checkpoint {args.checkpoint}")
    ds = Dataset(args.data)
    if args.path:
        try:
            cams = load_cameras(args.path)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid camera path file: {exc}") from exc
    else:
        cams = orbit_cameras(SceneSpec.from_dict(ds.spec), args.orbit)
    nets, _, tc, _ = load_checkpoint(args.checkpoint)
    cloud = fuse_frame(ds.frames(args.frame), ds.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cameras(out / "cameras.json", cams)
    for i, cam in enumerate(cams):
        with torch.no_grad():
            img, neural, m_neural, tex = render_full(nets, cloud, [cam], tc.branches)
        m_tex = render_textured(cloud, cam)[1]
        mask = m_tex | (m_neural[0].numpy() > 0.5)
        write_png_rgb(out / f"frame_{i:03d}.png", img[0].permute(1, 2, 0).numpy())
        from PIL import Image
        Image.fromarray(mask.astype(np.uint8) * 255, "L").save(out / f"mask_{i:03d}.png")
        if args.debug_branches:
            write_png_rgb(out / f"tex_{i:03d}.png", tex[0].permute(1, 2, 0).numpy())
            write_png_rgb(out / f"neural_{i:03d}.png", neural[0].permute(1, 2, 0).numpy())
    print(f"wrote {len(cams)} frames to {out}")


def cmd_evaluate(args, cfg):
    _set(cfg, "evaluate", "split", args.split)
    _set(cfg, "evaluate", "stride", args.stride)
    for c in args.checkpoint:
        if not Path(c).exists():
            raise DataError(f"missing checkpoint {c}")
    rows = do_evaluate(Dataset(args.data), args.checkpoint, cfg["evaluate"], Path(args.out))
    for r in rows:
        print(f"{r['variant']:>12}  PSNR {r['psnr']:.2f}  SSIM {r['ssim']:.4f}  "
              f"L1 {r['photometric']:.4f}  MSE {r['mse']:.6f}")


def cmd_study(args, cfg):
    from .eval_metrics import keyframe_study

    if args.ks:
        cfg["study"]["ks"] = _int_list(args.ks)
    if args.methods:
        cfg["study"]["methods"] = [m for m in args.methods.split(",") if m]
    _set(cfg, "study", "trials", args.trials)
    _set(cfg, "study", "mode", args.mode)
    sc = cfg["study"]
    ds = Dataset(args.data)
    poses = poses_for(ds, tri_config(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_fn = None
    if sc["mode"] == "full":
        tc = train_config(cfg)
        counter = iter(range(10 ** 6))

        def train_fn(indices):
            from .eval_metrics import evaluate_run
            sub = out / f"train_{next(counter):03d}"
            ckpt = do_train(ds, indices, tc, sub)
            rows = evaluate_run(str(ckpt), ds, "holdout", int(cfg["evaluate"].get("stride", 1)),
                                include_proxy=False)
            return rows[0]["mse"]
    try:
        rows = keyframe_study(poses, sc["ks"], sc["methods"], int(sc["trials"]), mode=sc["mode"],
                              train_fn=train_fn)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report.write_json(out / "study.json", {"rows": rows})
    report.write_csv(out / "study.csv", rows)
    report.plot_study(rows, out / "study.png")
    if sc["mode"] == "full":
        report.plot_study(rows, out / "study_mse.png", key="mse_mean")
    for r in rows:
        print(f"k={r['k']:>3} {r['method']:>6}  coverage {r['coverage_mean']:.4f} +- {r['coverage_std']:.4f}")


def cmd_run(args, cfg):
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    marks = run / "stages"
    marks.mkdir(exist_ok=True)
    report.write_json(run / "config.resolved.json", cfg)
    spec = scene_spec(cfg)
    tcfg = tri_config(cfg)
    tc = train_config(cfg)
    variants = cfg["run"].get("variants", ["both"])
    data = run / "data"

    def stage_generate():
        if data.exists():
            shutil.rmtree(data)
        generate_sequence(spec, data, workers=int(cfg["run"].get("workers", 1)))

    def stage_triangulate():
        report.write_json(run / "triangulation.json", do_triangulate(Dataset(data), tcfg))

    def stage_keyframes():
        ds = Dataset(data)
        do_keyframes(ds, cfg, tcfg).save(data / "keyframes.json")

    def stage_fuse():
        ds = Dataset(data)
        keys = KeyframeSet.load(data / "keyframes.json").indices
        report.write_json(run / "fusion.json", {"frames": do_fuse(ds, keys)})

    def stage_train():
        ds = Dataset(data)
        keys = KeyframeSet.load(data / "keyframes.json").indices
        for b in variants:
            do_train(ds, keys, TrainConfig.from_dict({**tc.to_dict(), "branches": b}), run / f"train_{b}")

    def stage_evaluate():
        ckpts = [run / f"train_{b}" / "checkpoint.pt" for b in variants]
        do_evaluate(Dataset(data), ckpts, cfg["evaluate"], run / "eval" / "metrics.json")

    funcs = dict(generate=stage_generate, triangulate=stage_triangulate, keyframes=stage_keyframes,
                 fuse=stage_fuse, train=stage_train, evaluate=stage_evaluate)
    state = run / "state.json"
    dirty = False
    for name in STAGES:
        marker = marks / f"{name}.done"
        if marker.exists() and not dirty:
            print(f"[skip] {name}")
            continue
        dirty = True
        for later in STAGES[STAGES.index(name):]:
            (marks / f"{later}.done").unlink(missing_ok=True)
        print(f"[run ] {name}", flush=True)
        try:
            funcs[name]()
        except Exception as exc:
            report.write_json(state, {"failed_stage": name, "error": f"{type(exc).__name__}: {exc}",
                                      "completed": [s for s in STAGES if (marks / f"{s}.done").exists()]})
            print(f"stage {name} failed: {exc}", file=sys.stderr)
            raise
        marker.write_text("done\n")
    state.unlink(missing_ok=True)
    print(f"pipeline complete: {run}")


# ----------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fewshot-render",
                                description="Few-shot free-viewpoint rendering of a performer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="sectioned JSON config")
        sp.set_defaults(func=fn)
        return sp

    g = cmd("generate", cmd_generate, "render a synthetic multi-view RGBD sequence")
    g.add_argument("--out", required=True)
    g.add_argument("--spec", help="scene spec JSON (flat SceneSpec fields)")
    g.add_argument("--frames", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int, default=1)

    t = cmd("triangulate", cmd_triangulate, "lift per-view 2D joints to 3D poses")
    t.add_argument("--data", required=True)
    t.add_argument("--method", choices=["rays+depth", "rays", "depth"])
    t.add_argument("--out", help="summary JSON")

    k = cmd("keyframes", cmd_keyframes, "select key-frames")
    k.add_argument("--data", required=True)
    k.add_argument("--k", type=int)
    k.add_argument("--seed", type=int)
    k.add_argument("--method", choices=["pose", "random"])
    k.add_argument("--out")

    f = cmd("fuse", cmd_fuse, "fuse proxies and cache textured renders")
    f.add_argument("--data", required=True)
    f.add_argument("--frames", default="keyframes", help="keyframes, all, or a list like 0,5,9")

    tr = cmd("train", cmd_train, "train renderer and discriminator")
    tr.add_argument("--data", required=True)
    tr.add_argument("--keyframes", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--max-steps", type=int)
    tr.add_argument("--steps", type=int, help="stop after this many total steps")
    tr.add_argument("--resume")

    r = cmd("render", cmd_render, "render novel views of one frame")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--frame", type=int, default=0)
    grp = r.add_mutually_exclusive_group(required=True)
    grp.add_argument("--path", help="camera path JSON (list of camera records)")
    grp.add_argument("--orbit", type=int, help="number of cameras on a full circle")
    r.add_argument("--out", required=True)
    r.add_argument("--debug-branches", action="store_true")

    e = cmd("evaluate", cmd_evaluate, "metrics on captured views")
    e.add_argument("--checkpoint", required=True, nargs="+")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["holdout", "keyframes"])
    e.add_argument("--stride", type=int)
    e.add_argument("--out", default="metrics.json")

    s = cmd("study", cmd_study, "key-frame selection study")
    s.add_argument("--data", required=True)
    s.add_argument("--ks")
    s.add_argument("--methods")
    s.add_argument("--trials", type=int)
    s.add_argument("--mode", choices=["fast", "full"])
    s.add_argument("--out", default="study")

    rn = cmd("run", cmd_run, "end-to-end pipeline with resumable stages")
    rn.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteLoss as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
