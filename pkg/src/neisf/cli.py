"""Command-line entry points: gen / train / render / eval / probe.

Exit codes: 0 success, 2 usage or input error, 3 missing prerequisite
artifact, 4 numerical failure (NaN aborts loudly with a batch dump).

The --threads flag must take effect before the BLAS loads, so it is read
from argv at import time, before any numpy-backed module comes in.
"""

import argparse
import json
import os
import subprocess
import sys
import time


def _early_threads():
    argv = sys.argv
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--threads="):
            return a.split("=", 1)[1]
    return None


_T = _early_threads()
if _T is not None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = _T

import numpy as np

from . import formats
from .camera import orbit_rig
from .fields import FieldBundle
from .train import (Dataset, MetricsReport, NanError, TrainConfig,
                    checkpoint_name, dolp, evaluate, train_stages)

USAGE_ERROR = 2
MISSING_PREREQ = 3
NUMERIC_FAILURE = 4

AOV_CHOICES = ("stokes", "dolp", "normal", "albedo", "roughness", "diffuse",
               "specular")


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except OSError:
        return "unknown"


def write_manifest(out_dir, command, args, seed, t0, outputs, effective=None):
    """One manifest per run, always."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"command": command,
                "config_file": getattr(args, "config", None),
                "seed": seed,
                "git_describe": _git_describe(),
                "wall_time_s": round(time.time() - t0, 3),
                "outputs": sorted(outputs),
                "effective_config": effective or {}}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return path


def _seed_of(args):
    if args.seed is not None:
        return int(args.seed)
    return int(os.environ.get("NEISF_SEED", "0"))


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def _dump_nan(out_dir, err):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "nan_dump.json")
    with open(path, "w") as f:
        json.dump({"message": str(err), "batch_indices": err.batch_indices}, f)
    print(f"error: {err} (batch dump: {path})", file=sys.stderr)


# -- gen ----------------------------------------------------------------------


def cmd_gen(args):
    from .scene import load_scene
    from .tracer import PathConfig, render_dataset
    if not os.path.exists(args.scene):
        return _fail(USAGE_ERROR, f"scene file not found: {args.scene}")
    t0 = time.time()
    seed = _seed_of(args)
    scene = load_scene(args.scene)
    poses = orbit_rig(args.views, args.width, args.height)
    if args.test_views:
        test = [int(v) for v in args.test_views.split(",")]
    else:
        n = args.views
        test = sorted({n // 4, n // 2, (3 * n) // 4}) if n >= 4 else []
    bad = [v for v in test if not 0 <= v < args.views]
    if bad:
        return _fail(USAGE_ERROR, f"test views out of range: {bad}")
    cfg = PathConfig(max_depth=args.depth, spp=args.spp, seed=seed)
    render_dataset(scene, poses, cfg, args.out, test_views=test)
    outputs = [os.path.join(args.out, "dataset.json")]
    write_manifest(args.out, "gen", args, seed, t0, outputs,
                   {"views": args.views, "spp": args.spp, "depth": args.depth,
                    "width": args.width, "height": args.height, "test_views": test})
    print(f"wrote {args.views} views to {args.out}")
    return 0


# -- train --------------------------------------------------------------------


def _load_train_config(args, seed):
    cfg_dict = {}
    if args.config:
        if not os.path.exists(args.config):
            return None, _fail(USAGE_ERROR, f"config file not found: {args.config}")
        with open(args.config) as f:
            cfg_dict.update(json.load(f))
    # CLI flags override config-file values override defaults
    cfg_dict["seed"] = seed
    cfg_dict["ablation"] = args.ablation
    if args.batch is not None:
        cfg_dict["batch"] = args.batch
    if args.iters is not None:
        cfg_dict["stage_iters"] = [int(k) for k in args.iters.split(",")]
    try:
        return TrainConfig.from_dict(cfg_dict), None
    except (ValueError, TypeError) as e:
        return None, _fail(USAGE_ERROR, f"bad config: {e}")


def cmd_train(args):
    if not os.path.exists(os.path.join(args.dataset, "dataset.json")):
        return _fail(MISSING_PREREQ, f"dataset not found: {args.dataset}")
    t0 = time.time()
    seed = _seed_of(args)
    cfg, err = _load_train_config(args, seed)
    if err is not None:
        return err
    ds = Dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, f"train_{cfg.ablation}.csv")

    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    # resume at stage granularity: completed checkpoints are not redone
    if args.stage == "all":
        stages = tuple(s for s in stages if not os.path.exists(
            os.path.join(args.out, checkpoint_name(s, cfg.ablation))))
        if not stages:
            print("all stage checkpoints present; nothing to do")
            return 0
    bundle = None
    first = stages[0]
    if first > 1:
        prev = os.path.join(args.out, checkpoint_name(first - 1, cfg.ablation))
        if not os.path.exists(prev):
            return _fail(MISSING_PREREQ, f"stage {first} needs checkpoint {prev}")
        bundle, _ = FieldBundle.load(prev)
    try:
        train_stages(ds, cfg, stages=stages, bundle=bundle, out_dir=args.out,
                     log_path=log_path)
    except NanError as e:
        _dump_nan(args.out, e)
        return NUMERIC_FAILURE
    outputs = [os.path.join(args.out, checkpoint_name(s, cfg.ablation)) for s in stages]
    write_manifest(args.out, "train", args, seed, t0, outputs, cfg.to_dict())
    print(f"trained stages {list(stages)} -> {args.out}")
    return 0


# -- render ---------------------------------------------------------------------


def _render_views(bundle, poses, args):
    from .renderer import render_bundle_view
    out = {}
    for pose in poses:
        out[pose.view] = render_bundle_view(bundle, pose, n_quad=args.n_quad,
                                            chunk=args.chunk)
    return out


def cmd_render(args):
    if not os.path.exists(args.checkpoint):
        return _fail(MISSING_PREREQ, f"checkpoint not found: {args.checkpoint}")
    if not os.path.exists(args.poses):
        return _fail(MISSING_PREREQ, f"poses file not found: {args.poses}")
    t0 = time.time()
    seed = _seed_of(args)
    bundle, _ = FieldBundle.load(args.checkpoint)
    poses = formats.load_poses(args.poses)
    if args.views:
        keep = {int(v) for v in args.views.split(",")}
        poses = [p for p in poses if p.view in keep]
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    rendered = _render_views(bundle, poses, args)
    for view, planes in rendered.items():
        if not np.isfinite(planes["stokes"]).all():
            _dump_nan(args.out, NanError(f"non-finite render on view {view}", [view]))
            return NUMERIC_FAILURE
        if args.aov == "stokes":
            path = os.path.join(args.out, f"view_{view:04d}.pstk")
            formats.write_pstk(path, planes["stokes"])
        elif args.aov == "dolp":
            path = os.path.join(args.out, f"{view:04d}_dolp.pfm")
            # floor + clip guard the divide on empty pixels
            formats.write_pfm(path, np.clip(dolp(planes["stokes"]), 0.0, 1.0))
        else:
            path = os.path.join(args.out, f"{view:04d}_{args.aov}.pfm")
            formats.write_pfm(path, planes[args.aov])
        outputs.append(path)
    write_manifest(args.out, "render", args, seed, t0, outputs,
                   {"aov": args.aov, "n_quad": args.n_quad})
    print(f"wrote {len(outputs)} {args.aov} images to {args.out}")
    return 0


# -- eval ---------------------------------------------------------------------


def cmd_eval(args):
    if not os.path.exists(args.checkpoint):
        return _fail(MISSING_PREREQ, f"checkpoint not found: {args.checkpoint}")
    if not os.path.exists(os.path.join(args.dataset, "dataset.json")):
        return _fail(MISSING_PREREQ, f"dataset not found: {args.dataset}")
    t0 = time.time()
    seed = _seed_of(args)
    ds = Dataset(args.dataset)
    for v in ds.test_views:
        for name in Dataset.AOVS:
            if not ds.has_aov(v, name):
                return _fail(MISSING_PREREQ, f"missing GT AOV '{name}' for view {v}")
    bundle, scalars = FieldBundle.load(args.checkpoint)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    try:
        report = evaluate(bundle, ds, n_quad=args.n_quad, nopol=args.nopol,
                          chunk=args.chunk)
    except NanError as e:
        _dump_nan(out_dir, e)
        return NUMERIC_FAILURE
    report.to_json(args.out)
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    report.to_csv(csv_path)
    write_manifest(out_dir, "eval", args, seed, t0, [args.out, csv_path],
                   {"n_quad": args.n_quad, "nopol": args.nopol})
    for k in MetricsReport.FIELDS:
        print(f"{k}: {getattr(report, k):.6g}")
    return 0


# -- probe ----------------------------------------------------------------------


def _parse_vec(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected x,y,z — got {text!r}")
    return np.asarray(parts, dtype=np.float64)


def cmd_probe(args):
    from .renderer import fibonacci_hemisphere
    if args.dirs <= 0:
        return _fail(USAGE_ERROR, "--dirs must be positive")
    try:
        point = _parse_vec(args.point)
        wo = None if args.wo is None else _parse_vec(args.wo)
    except ValueError as e:
        return _fail(USAGE_ERROR, str(e))
    if not os.path.exists(args.source):
        return _fail(MISSING_PREREQ, f"probe source not found: {args.source}")
    t0 = time.time()
    seed = _seed_of(args)

    oracle = args.source.endswith(".json")
    if oracle:
        from .scene import load_scene
        from .tracer import PathConfig, trace_incident_rotated
        scene = load_scene(args.source)
        normal = scene.normal(point[None])[0]
    else:
        bundle, _ = FieldBundle.load(args.source)
        _, grad = bundle.sdf(point[None], with_grad=True)
        g = grad.data.reshape(3)
        normal = g / max(np.linalg.norm(g), 1e-12)
        bundle.tape.reset()
    if wo is None:
        wo = normal.copy()
    wo = wo / max(np.linalg.norm(wo), 1e-12)

    quad = fibonacci_hemisphere(args.dirs, normal[None])
    wi = quad.directions[0]
    x = np.tile(point, (args.dirs, 1))
    n = np.tile(normal, (args.dirs, 1))
    wo_rep = np.tile(wo, (args.dirs, 1))
    if oracle:
        cfg = PathConfig(max_depth=args.depth, spp=args.spp, seed=seed)
        s_dif, s_spec = trace_incident_rotated(scene, x, n, wi, wo_rep, cfg)
    else:
        sd, ss = bundle.incident(x, wi)
        s_dif, s_spec = sd.data, ss.data
        bundle.tape.reset()

    header = (["wi_x", "wi_y", "wi_z"]
              + [f"dif_s{i}_{c}" for i in range(3) for c in "rgb"]
              + [f"spec_s{i}_{c}" for i in range(3) for c in "rgb"])
    if os.path.exists(args.out):
        os.remove(args.out)
    for k in range(args.dirs):
        row = ([f"{v:.9g}" for v in wi[k]]
               + [f"{v:.9g}" for v in s_dif[k].reshape(-1)]
               + [f"{v:.9g}" for v in s_spec[k].reshape(-1)])
        formats.append_csv_row(args.out, header, row)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_manifest(out_dir, "probe", args, seed, t0, [args.out],
                   {"dirs": args.dirs, "mode": "oracle" if oracle else "field",
                    "point": args.point})
    print(f"wrote {args.dirs} probe rows to {args.out}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="neisf",
                                description="Polarimetric inverse rendering pipeline")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread cap; 1 gives bit-exact runs")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a dataset from a scene file")
    g.add_argument("scene")
    g.add_argument("--views", type=int, default=15)
    g.add_argument("--spp", type=int, default=48)
    g.add_argument("--depth", type=int, default=6)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--test-views", default=None, help="comma list, e.g. 3,7,11")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="run the three-stage optimization")
    t.add_argument("dataset")
    t.add_argument("--config", default=None, help="JSON of TrainConfig fields")
    t.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    t.add_argument("--ablation", choices=("pol", "nopol"), default="pol")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--iters", default=None, help="comma triple overriding stage_iters")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render AOV images from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("--poses", required=True)
    r.add_argument("--views", default=None, help="comma list, default all")
    r.add_argument("--aov", choices=AOV_CHOICES, required=True)
    r.add_argument("--n-quad", type=int, default=256)
    r.add_argument("--chunk", type=int, default=512)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="score a checkpoint on the held-out views")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--n-quad", type=int, default=256)
    e.add_argument("--chunk", type=int, default=512)
    e.add_argument("--nopol", action="store_true")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("probe", help="incident Stokes table at a point")
    pr.add_argument("source", help="checkpoint (field mode) or scene.json (oracle)")
    pr.add_argument("--point", required=True, help="x,y,z")
    pr.add_argument("--dirs", type=int, required=True)
    pr.add_argument("--wo", default=None, help="outgoing direction x,y,z")
    pr.add_argument("--spp", type=int, default=64)
    pr.add_argument("--depth", type=int, default=5)
    pr.add_argument("--seed", type=int, default=None)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_probe)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
