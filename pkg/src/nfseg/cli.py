"""Command-line entry point: make-synthetic, train, render, eval.

Every command writes a run manifest (config echo, seed, code version, scene
hash, output paths) into the output directory and is reproducible: the same
inputs and seed give byte-identical checkpoints, images and metric CSVs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""

import hashlib
import json
import os
import sys
import time


def _cap_threads():
    n = os.environ.get("NFSEG_THREADS")
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, n)


_cap_threads()

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .cluster_eval import evaluate_scene, format_eval_table, write_eval_csv
from .field import DivergenceError, FieldParams
from .render import render_view
from .scene import Scene, SceneError, load_scene, save_scene
from .synthetic import default_spec, make_synthetic_scene, two_object_spec
from .training import (MetricsLog, TrainConfig, desk_config, load_checkpoint,
                       paper_config, train_stage1, train_stage2)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def scene_hash(scene_dir) -> str:
    """sha256 over the manifest and every file it references."""
    root = Path(scene_dir)
    manifest = root / "scene.json"
    h = hashlib.sha256()
    h.update(manifest.read_bytes())
    entries = json.loads(manifest.read_text())
    for view in entries.get("views", []):
        for key in ("image", "mask", "features", "tokens"):
            rel = view.get(key)
            if rel:
                h.update((root / rel).read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, command, args_echo, seed, scene_dir=None,
                   outputs=None, timings=None):
    manifest = {
        "command": command,
        "args": args_echo,
        "seed": seed,
        "version": __version__,
        "scene_hash": scene_hash(scene_dir) if scene_dir else None,
        "outputs": outputs or [],
        "timings": timings or {},
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _config_for(args, scene: Scene) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    elif args.profile == "paper":
        cfg = paper_config()
    else:
        cfg = desk_config()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_make_synthetic(args) -> int:
    if args.views < 2:
        raise UsageError("--views must be at least 2")
    if args.objects == 1:
        spec = default_spec(n_views=args.views, n_test=args.test_views,
                            width=args.size, height=args.size, sigma_f=args.sigma_f)
    else:
        spec = two_object_spec(n_views=args.views, n_test=args.test_views,
                               width=args.size, height=args.size, sigma_f=args.sigma_f)
    scene = make_synthetic_scene(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out)
    write_manifest(out, "make-synthetic", _echo(args), args.seed, scene_dir=out,
                   outputs=["scene.json"])
    print(f"wrote {len(scene.views)}-view synthetic scene to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    scene = load_scene(args.scene)
    cfg = _config_for(args, scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(out / "metrics.csv")
    t_start = time.time()
    timings = {}

    stage1_path = out / "stage1.nsck"
    stage2_path = out / "stage2.nsck"

    if args.stage in ("1", "all"):
        params = FieldParams.init(cfg.field, seed=cfg.seed, dtype=cfg.np_dtype())
        try:
            params, _ = train_stage1(scene, cfg, params, log=log,
                                     checkpoint_path=stage1_path)
        except DivergenceError as e:
            print(f"error: {e} (checkpoint saved to {stage1_path})", file=sys.stderr)
            return EXIT_DIVERGED
        timings["stage1_seconds"] = round(time.time() - t_start, 3)

    if args.stage in ("2", "all"):
        if args.stage == "2":
            ckpt_in = Path(args.checkpoint) if args.checkpoint else stage1_path
            if not ckpt_in.exists():
                raise SceneError(f"stage 2 needs a stage-1 checkpoint; missing {ckpt_in} "
                                 "(run --stage 1 first or pass --checkpoint)")
            state = load_checkpoint(ckpt_in)
            params = state["params"]
            if args.config is None and args.profile is None:
                cfg = state["config"]
                if args.seed is not None:
                    cfg.seed = args.seed
        t2 = time.time()
        try:
            params, _ = train_stage2(scene, cfg, params, log=log,
                                     checkpoint_path=stage2_path)
        except DivergenceError as e:
            print(f"error: {e} (checkpoint saved to {stage2_path})", file=sys.stderr)
            return EXIT_DIVERGED
        timings["stage2_seconds"] = round(time.time() - t2, 3)

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    outputs = [p.name for p in (stage1_path, stage2_path, out / "metrics.csv", out / "config.json")
               if p.exists()]
    write_manifest(out, "train", _echo(args), cfg.seed, scene_dir=args.scene,
                   outputs=outputs, timings=timings)
    print(f"training complete; outputs in {out}")
    return EXIT_OK


_DEPTH_RAMP = np.array([
    [0.050, 0.030, 0.530], [0.295, 0.000, 0.630], [0.492, 0.012, 0.658],
    [0.658, 0.135, 0.588], [0.797, 0.280, 0.470], [0.902, 0.425, 0.355],
    [0.973, 0.585, 0.252], [0.993, 0.772, 0.155], [0.940, 0.975, 0.131],
])


def depth_colormap(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    """Fixed piecewise-linear ramp from near (dark blue) to far (yellow);
    zero depth (empty rays) stays black."""
    t = np.clip((depth - near) / max(far - near, 1e-9), 0.0, 1.0)
    t = t * (len(_DEPTH_RAMP) - 1)
    lo = np.floor(t).astype(int)
    hi = np.minimum(lo + 1, len(_DEPTH_RAMP) - 1)
    frac = (t - lo)[..., None]
    rgb = _DEPTH_RAMP[lo] * (1 - frac) + _DEPTH_RAMP[hi] * frac
    rgb[depth <= 0.0] = 0.0
    return rgb


_MASK_TINTS = np.array([
    [0.0, 0.0, 0.0], [0.95, 0.1, 0.1], [0.1, 0.35, 0.95], [0.1, 0.9, 0.3],
    [0.9, 0.9, 0.1], [0.8, 0.1, 0.9],
])


def mask_overlay(color: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """50% alpha label tint over the rendered color."""
    tint = _MASK_TINTS[np.clip(labels, 0, len(_MASK_TINTS) - 1)]
    out = color.copy()
    fg = labels > 0
    out[fg] = 0.5 * color[fg] + 0.5 * tint[fg]
    return out


def _save_png(path, img01):
    Image.fromarray(np.rint(np.clip(img01, 0, 1) * 255).astype(np.uint8)).save(path, format="PNG")


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    state = load_checkpoint(args.checkpoint)
    params = state["params"]
    cfg = state["config"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.views_list:
        ids = []
        by_name = {v.view_id: i for i, v in enumerate(scene.views)}
        for tok in args.views_list.split(","):
            tok = tok.strip()
            if tok in by_name:
                ids.append(by_name[tok])
            elif tok.isdigit() and int(tok) < len(scene.views):
                ids.append(int(tok))
            else:
                raise SceneError(f"unknown view id {tok!r}")
    else:
        ids = scene.test_ids

    model = None
    if args.clusters:
        from .cluster_eval import assign, fit_kmeans
        renders = {i: render_view(params, scene.camera, scene.views[i].pose,
                                  cfg.n_samples, args.chunk_size) for i in ids}
        pooled = np.concatenate([r.seg.reshape(-1, r.seg.shape[-1]) for r in renders.values()])
        model = fit_kmeans(pooled, args.clusters, args.seed or 0)
    outputs = []
    for i in ids:
        v = scene.views[i]
        rp = renders[i] if model is not None else render_view(
            params, scene.camera, v.pose, cfg.n_samples, args.chunk_size)
        _save_png(out / f"{v.view_id}_color.png", rp.color)
        _save_png(out / f"{v.view_id}_depth.png",
                  depth_colormap(rp.depth, scene.camera.near, scene.camera.far))
        outputs += [f"{v.view_id}_color.png", f"{v.view_id}_depth.png"]
        if model is not None:
            labels = assign(model, rp.seg)
            _save_png(out / f"{v.view_id}_mask.png", mask_overlay(rp.color, labels))
            outputs.append(f"{v.view_id}_mask.png")
    write_manifest(out, "render", _echo(args), args.seed or 0, scene_dir=args.scene,
                   outputs=outputs, timings={})
    print(f"rendered {len(ids)} views to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    state = load_checkpoint(args.checkpoint)
    params = state["params"]
    cfg = state["config"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics, rows, extras = evaluate_scene(
        params, scene, n_clusters=args.clusters or 2, seed=args.seed or 0,
        n_samples=cfg.n_samples, chunk_size=args.chunk_size,
        fg_by_activation=args.fg_by_activation)
    means = {"psnr": extras["psnr"], "ssim": extras["ssim"], "nv_ari": metrics.nv_ari,
             "iou_bg": metrics.iou_bg, "iou_fg": metrics.iou_fg, "miou": metrics.miou}
    write_eval_csv(out / "eval.csv", rows, means, extras["pooled_ari"])
    table = format_eval_table(rows, means, extras["pooled_ari"])
    (out / "eval.txt").write_text(table + "\n")
    print(table)
    write_manifest(out, "eval", _echo(args), args.seed or 0, scene_dir=args.scene,
                   outputs=["eval.csv", "eval.txt"], timings={})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _echo(args):
    # the manifest sits inside the out dir; echoing that path would make
    # otherwise-identical runs differ byte-wise
    return {k: v for k, v in vars(args).items()
            if k not in ("func", "out") and v is not None}


def build_parser() -> _Parser:
    p = _Parser(prog="nfseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-synthetic", help="generate a synthetic scene")
    mk.add_argument("--out", required=True)
    mk.add_argument("--seed", type=int, default=0)
    mk.add_argument("--views", type=int, default=24)
    mk.add_argument("--test-views", type=int, default=4, dest="test_views")
    mk.add_argument("--size", type=int, default=64)
    mk.add_argument("--objects", type=int, choices=(1, 2), default=1)
    mk.add_argument("--sigma-f", type=float, default=0.3, dest="sigma_f")
    mk.set_defaults(func=cmd_make_synthetic)

    tr = sub.add_parser("train", help="run the two-stage training schedule")
    tr.add_argument("--scene", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--stage", choices=("1", "2", "all"), default="all")
    tr.add_argument("--config", help="TrainConfig JSON file")
    tr.add_argument("--profile", choices=("paper", "desk"), default=None)
    tr.add_argument("--checkpoint", help="stage-1 checkpoint for --stage 2")
    tr.add_argument("--seed", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    rd = sub.add_parser("render", help="render color/depth/mask images")
    rd.add_argument("--scene", required=True)
    rd.add_argument("--checkpoint", required=True)
    rd.add_argument("--out", required=True)
    rd.add_argument("--views", dest="views_list", help="comma-separated ids (default: test split)")
    rd.add_argument("--clusters", type=int, default=0, help="also emit K-means mask overlays")
    rd.add_argument("--seed", type=int, default=0)
    rd.add_argument("--chunk-size", type=int, default=4096, dest="chunk_size")
    rd.set_defaults(func=cmd_render)

    ev = sub.add_parser("eval", help="evaluate segmentation and rendering metrics")
    ev.add_argument("--scene", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--clusters", type=int, default=2)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--chunk-size", type=int, default=4096, dest="chunk_size")
    ev.add_argument("--fg-by-activation", action="store_true", dest="fg_by_activation",
                    help="pick the foreground cluster by feature activation instead of "
                         "best-permutation matching")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SceneError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
