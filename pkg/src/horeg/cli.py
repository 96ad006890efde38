"""Command-line entry point: ``horeg <subcommand> [flags]``.

Every subcommand also reads ``--config FILE``: an INI-style file whose
section named after the subcommand holds ``flag = value`` pairs (flag names
without leading dashes, ``-`` or ``_`` both accepted). Command-line flags win.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure. On
failure one JSON line ``{"error": kind, "type": ..., "message": ...}`` is
written to standard error.
"""
import argparse
import configparser
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import fileio
from .errors import DataError, HoregError, NumericalError
from .geom import ColoredPointCloud

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seq_path(args, *parts):
    return os.path.join(args.seq, *parts)


def _floats(text: str, n: Optional[int] = None) -> List[float]:
    vals = [float(x) for x in text.replace(",", " ").split()]
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} numbers, got {len(vals)}")
    return vals


# ------------------------------------------------------------- commands

def cmd_synth(args):
    from .synth import NoiseSpec, make_hand_rig, make_scene, perturb_poses, render
    from .handcam import synth_keypoints

    noise = NoiseSpec(args.noise_depth, args.noise_keypoint_px, args.noise_keypoint_3d,
                      (args.noise_pose_deg, args.noise_pose_m), args.noise_mask_erosion)
    scene = make_scene(args.kind, args.frames, args.seed, args.scale, args.orbit_radius, noise=noise,
                       sleeve=args.sleeve)
    frames = render(scene)
    out = args.out
    tags = dict(t.split("=", 1) for t in args.tag)
    fileio.write_manifest(out, len(frames), scene.intrinsics, tags, kind=args.kind, seed=args.seed,
                          scale=args.scale)
    for i, fr in enumerate(frames):
        fileio.write_ppm(fileio.frame_path(out, i, "img"), fr.image)
        fileio.write_pgm(fileio.frame_path(out, i, "mask"), fr.mask)
        fileio.write_cloud(fileio.frame_path(out, i, "cloud"), fr.cloud)
    fileio.write_poses(os.path.join(out, "poses", "gt.txt"), scene.trajectory)
    init = perturb_poses(scene.trajectory, *noise.pose_perturb, seed=args.seed + 1)
    fileio.write_poses(os.path.join(out, "poses", "init.txt"), init)
    rig = make_hand_rig(args.seed)
    kps = synth_keypoints(rig.joints, scene.trajectory, scene.intrinsics, noise.keypoint_sigma_px,
                          noise.keypoint_sigma_3d, args.seed + 2)
    fileio.write_keypoints(os.path.join(out, "keypoints.txt"), kps)
    fileio.write_mesh(os.path.join(out, "gt", "mesh.ply"), scene.mesh)


def cmd_segment(args):
    man = fileio.read_manifest(args.seq)
    K = man["K"]
    color = np.asarray(_floats(args.sleeve_color, 3))
    for i in range(man["n_frames"]):
        image = fileio.read_ppm(fileio.frame_path(args.seq, i, "img"))
        cloud = fileio.read_cloud(fileio.frame_path(args.seq, i, "cloud"))
        mask = segment_mask(image, cloud, K.height, K.width, args.depth_min, args.depth_max, color, args.tol)
        keep = mask[cloud.pixels[:, 1], cloud.pixels[:, 0]] if len(cloud) else np.zeros(0, bool)
        fileio.write_pgm(fileio.frame_path(args.seq, i, "mask"), mask)
        fileio.write_cloud(fileio.frame_path(args.seq, i, "cloud"), cloud.subset(np.flatnonzero(keep)))


def segment_mask(image, cloud: ColoredPointCloud, height: int, width: int, depth_min: float, depth_max: float,
                 sleeve_color, tol: float) -> np.ndarray:
    """Pixels with depth in [depth_min, depth_max] and colour farther than ``tol`` from the sleeve."""
    depth = np.zeros((height, width))
    if len(cloud):
        if cloud.pixels is None:
            raise DataError("segmentation needs clouds carrying pixel coordinates")
        depth[cloud.pixels[:, 1], cloud.pixels[:, 0]] = cloud.positions[:, 2]
    near_ok = (depth >= depth_min) & (depth <= depth_max) & (depth > 0)
    sleeve = np.all(np.abs(image - np.asarray(sleeve_color)) <= tol, axis=-1)
    return near_ok & ~sleeve


def _load_clouds(seq, n):
    return [fileio.read_cloud(fileio.frame_path(seq, i, "cloud")) for i in range(n)]


def cmd_icp_align(args):
    from .align.icp import IcpConfig, sequential_icp

    man = fileio.read_manifest(args.seq)
    init_path = args.init_pose or _seq_path(args, "poses", "init.txt")
    init = fileio.read_poses(init_path)
    if len(init) == 0:
        raise DataError(f"{init_path}: no poses")
    cfg = IcpConfig(args.max_iterations, args.radius, args.trim, args.eps, args.mode, args.min_samples, args.seed)
    mesh = fileio.read_mesh(args.mesh or _seq_path(args, "gt", "mesh.ply"))
    clouds = _load_clouds(args.seq, man["n_frames"])
    # clouds may be empty after segmentation; those frames come back invalid
    seq = sequential_icp(clouds, mesh, init.poses[0], cfg)
    out = args.out or _seq_path(args, "poses", "icp.txt")
    fileio.write_poses(out, seq)
    with open(os.path.splitext(out)[0] + "_residuals.txt", "w") as f:
        f.write("# frame residual_m\n")
        for i, r in enumerate(seq.residuals):
            f.write(f"{i} {r!r}\n")


def _parse_grid(text: Optional[str]):
    from .refine import DEFAULT_GRID
    if not text:
        return None
    if text == "default":
        return DEFAULT_GRID
    pairs = []
    for item in text.split(","):
        s, w = item.split(":")
        pairs.append((float(s), float(w)))
    return tuple(pairs)


def cmd_refine(args):
    from .refine import Frame, RefineConfig, refine

    man = fileio.read_manifest(args.seq)
    K = man["K"]
    frames = [Frame(fileio.read_ppm(fileio.frame_path(args.seq, i, "img")),
                    fileio.read_pgm(fileio.frame_path(args.seq, i, "mask")), K) for i in range(man["n_frames"])]
    poses = fileio.read_poses(args.poses or _seq_path(args, "poses", "icp.txt"))
    mesh = fileio.read_mesh(args.mesh or _seq_path(args, "gt", "mesh.ply"))
    cfg = RefineConfig(args.lambda_smooth, args.lambda_wd, args.iterations, args.samples_per_camera,
                       args.lr_appearance, args.lr_pose, num_points=args.num_points, seed=args.seed,
                       grid=_parse_grid(args.grid))
    res = refine(frames, mesh, poses, cfg)
    fileio.write_poses(args.out or _seq_path(args, "poses", "refined.txt"), res.poses)
    trace = [dict(r, lambda_smooth=res.lambda_smooth, lambda_wd=res.lambda_wd) for r in res.history]
    trace.append({"summary": True, "L_RGB_full_initial": res.rgb_full_initial,
                  "L_RGB_full_final": res.rgb_full_final, "runs": res.runs})
    fileio.write_jsonl(args.trace or _seq_path(args, "refine_trace.jsonl"), trace)


def cmd_hand_poses(args):
    from .handcam import SmoothingMode, hand_camera_poses

    man = fileio.read_manifest(args.seq)
    kps = fileio.read_keypoints(args.keypoints or _seq_path(args, "keypoints.txt"))
    if len(kps) != man["n_frames"]:
        raise DataError("keypoint file and manifest disagree on the frame count")
    seq = hand_camera_poses(kps, man["K"], SmoothingMode.parse(args.smooth))
    fileio.write_poses(args.out or _seq_path(args, "poses", "hand.txt"), seq)


def cmd_import_sfm(args):
    man = fileio.read_manifest(args.seq)
    with open(args.input) as f:
        seq = fileio.parse_sfm(f.read(), man["n_frames"], args.input)
    out = args.out or _seq_path(args, "poses", "sfm.txt")
    fileio.write_poses(out, seq)
    fileio.write_json(out + ".gauge", {"scale_free": bool(args.scale_free)})


def cmd_vh(args):
    from .vh import VhConfig, reconstruct

    man = fileio.read_manifest(args.seq)
    masks = [fileio.read_pgm(fileio.frame_path(args.seq, i, "mask")) for i in range(man["n_frames"])]
    poses = fileio.read_poses(args.poses or _seq_path(args, "poses", "refined.txt"))
    bounds = None
    if args.bounds:
        b = _floats(args.bounds, 6)
        bounds = (tuple(b[:3]), tuple(b[3:]))
    cfg = VhConfig(args.resolution, args.alpha, args.beta, bounds)
    res = reconstruct(masks, poses, man["K"], cfg)
    out = args.out or _seq_path(args, "recon", "vh.ply")
    status = {"success": res.success, "message": res.message}
    if res.success:
        fileio.write_mesh(out, res.mesh)
        status["voxel_size"] = float(np.max(res.grid.spacing))
    elif os.path.exists(out):
        os.remove(out)
    fileio.write_json(out + ".status.json", status)
    if not res.success:
        raise NumericalError(f"reconstruction failed: {res.message}")


def _write_report(out_base, report, man, seq):
    from .evaluate import report_to_dict
    recs = [(m, t, "", v) for m, t, v in report.metrics()]
    with open(out_base + ".tsv", "w") as f:
        f.write(fileio.format_report(recs))
    fileio.write_json(out_base + ".json", {"sequence": os.path.basename(os.path.normpath(seq)),
                                           "tags": man.get("tags", {}), "report": report_to_dict(report)})


def cmd_eval_recon(args):
    from .evaluate import eval_recon

    man = fileio.read_manifest(args.seq)
    pred_path = args.pred or _seq_path(args, "recon", "vh.ply")
    status_path = pred_path + ".status.json"
    failed = os.path.exists(status_path) and not fileio.read_json(status_path).get("success", False)
    pred = None if failed or not os.path.exists(pred_path) else fileio.read_mesh(pred_path)
    gt = fileio.read_mesh(args.gt or _seq_path(args, "gt", "mesh.ply"))
    thresholds = args.threshold or [0.005]
    rep = eval_recon(pred, gt, args.samples, thresholds, args.seed)
    os.makedirs(os.path.dirname(args.out or _seq_path(args, "reports", "x")) or ".", exist_ok=True)
    _write_report(args.out or _seq_path(args, "reports", "recon"), rep, man, args.seq)


def cmd_eval_poses(args):
    from .evaluate import DEFAULT_PAIRS, eval_poses

    man = fileio.read_manifest(args.seq)
    pred_path = args.pred or _seq_path(args, "poses", "refined.txt")
    pred = fileio.read_poses(pred_path)
    gt = fileio.read_poses(args.gt or _seq_path(args, "poses", "gt.txt"))
    scale_free = args.scale_free
    if os.path.exists(pred_path + ".gauge"):
        scale_free = scale_free or bool(fileio.read_json(pred_path + ".gauge").get("scale_free"))
    pairs = [tuple(_floats(p, 2)) for p in args.pair] if args.pair else DEFAULT_PAIRS
    rep = eval_poses(pred, gt, pairs, args.relative, scale_free)
    os.makedirs(os.path.dirname(args.out or _seq_path(args, "reports", "x")) or ".", exist_ok=True)
    _write_report(args.out or _seq_path(args, "reports", "poses"), rep, man, args.seq)


def cmd_report(args):
    from .evaluate import grouped_report, report_from_dict

    items = []
    for path in args.inputs:
        doc = fileio.read_json(path)
        try:
            tag = doc["tags"][args.group_by] if args.group_by else "all"
        except KeyError:
            raise DataError(f"{path}: no tag {args.group_by!r}") from None
        items.append((str(tag), report_from_dict(doc["report"])))
    groups = grouped_report(items)
    recs, summary = [], {}
    for tag in sorted(groups):
        summary[tag] = {}
        for (metric, thr), (mean, std) in sorted(groups[tag].items()):
            recs.append((metric + ".mean", thr, tag, mean))
            recs.append((metric + ".std", thr, tag, std))
            summary[tag][f"{metric}@{thr}" if thr else metric] = {"mean": mean, "std": std}
    with open(args.out + ".tsv", "w") as f:
        f.write(fileio.format_report(recs))
    fileio.write_json(args.out + ".json", {"group_by": args.group_by, "groups": summary,
                                           "n_reports": len(items)})


# -------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="horeg", description="Hand-object sequence registration and reconstruction toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(func=func)
        s.add_argument("--config", help="INI file with a [%s] section of flag = value pairs" % name)
        return s

    s = add("synth", cmd_synth, "generate a synthetic sequence")
    s.add_argument("--kind", default="bumpy_sphere", choices=["sphere", "bumpy_sphere", "box", "torus"])
    s.add_argument("--frames", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scale", type=float, default=0.1)
    s.add_argument("--orbit-radius", type=float, default=0.45)
    s.add_argument("--noise-depth", type=float, default=0.0)
    s.add_argument("--noise-keypoint-px", type=float, default=0.0)
    s.add_argument("--noise-keypoint-3d", type=float, default=0.0)
    s.add_argument("--noise-pose-deg", type=float, default=0.0)
    s.add_argument("--noise-pose-m", type=float, default=0.0)
    s.add_argument("--noise-mask-erosion", type=int, default=0)
    s.add_argument("--sleeve", action="store_true", help="render a uniformly coloured arm below the object")
    s.add_argument("--tag", action="append", default=[], help="manifest tag key=value")
    s.add_argument("--out", required=True)

    s = add("segment", cmd_segment, "depth and sleeve-colour foreground masks")
    s.add_argument("--seq", required=True)
    s.add_argument("--depth-min", type=float, default=0.0)
    s.add_argument("--depth-max", type=float, default=1.0)
    s.add_argument("--sleeve-color", default="0.1,0.85,0.2")
    s.add_argument("--tol", type=float, default=0.1)

    s = add("icp-align", cmd_icp_align, "sequential ICP against the reference mesh")
    s.add_argument("--seq", required=True)
    s.add_argument("--init-pose", help="pose file whose first entry initialises frame 0")
    s.add_argument("--mesh")
    s.add_argument("--out")
    s.add_argument("--max-iterations", type=int, default=50)
    s.add_argument("--radius", type=float, default=0.05)
    s.add_argument("--trim", type=float, default=0.2)
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--mode", default="point-to-plane", choices=["point-to-plane", "point-to-point"])
    s.add_argument("--min-samples", type=int, default=20000)
    s.add_argument("--seed", type=int, default=0)

    s = add("refine", cmd_refine, "photometric pose refinement")
    s.add_argument("--seq", required=True)
    s.add_argument("--poses")
    s.add_argument("--mesh")
    s.add_argument("--out")
    s.add_argument("--trace")
    s.add_argument("--lambda-smooth", type=float, default=1e-2)
    s.add_argument("--lambda-wd", type=float, default=1e-3)
    s.add_argument("--iterations", type=int, default=250)
    s.add_argument("--samples-per-camera", type=int, default=500)
    s.add_argument("--lr-appearance", type=float, default=0.5)
    s.add_argument("--lr-pose", type=float, default=5e-3)
    s.add_argument("--num-points", type=int, default=30000)
    s.add_argument("--grid", help="'default' or s1:w1,s2:w2,...")
    s.add_argument("--seed", type=int, default=0)

    s = add("hand-poses", cmd_hand_poses, "camera poses from hand keypoints")
    s.add_argument("--seq", required=True)
    s.add_argument("--keypoints")
    s.add_argument("--smooth", default="none", help="none | fixed | median5")
    s.add_argument("--out")

    s = add("import-sfm", cmd_import_sfm, "convert an SfM text export to a pose file")
    s.add_argument("--seq", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out")
    s.add_argument("--scale-free", action="store_true")

    s = add("vh", cmd_vh, "visual hull reconstruction")
    s.add_argument("--seq", required=True)
    s.add_argument("--poses")
    s.add_argument("--out")
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--alpha", type=int)
    s.add_argument("--beta", type=int)
    s.add_argument("--bounds", help="xmin,ymin,zmin,xmax,ymax,zmax in metres")

    s = add("eval-recon", cmd_eval_recon, "reconstruction metrics")
    s.add_argument("--seq", required=True)
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--samples", type=int, default=30000)
    s.add_argument("--threshold", type=float, action="append", help="metres; repeatable")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output path without extension")

    s = add("eval-poses", cmd_eval_poses, "pose metrics")
    s.add_argument("--seq", required=True)
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--relative", default="frame0", choices=["frame0", "consecutive"])
    s.add_argument("--scale-free", action="store_true")
    s.add_argument("--pair", action="append", help="'metres,degrees'; repeatable")
    s.add_argument("--out", help="output path without extension")

    s = add("report", cmd_report, "aggregate report JSON files by tag")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--group-by")
    s.add_argument("--out", required=True, help="output path without extension")
    return p


def _config_path(argv: List[str]) -> Optional[str]:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: List[str]) -> argparse.Namespace:
    """Parse ``argv`` with defaults taken from the config file section of the subcommand."""
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    path = _config_path(argv)
    if command is not None and path is not None:
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise DataError(f"cannot read config file {path}")
        if cp.has_section(command):
            sub = choices[command]
            actions = {a.dest: a for a in sub._actions}
            defaults = {}
            for key, raw in cp.items(command):
                dest = key.replace("-", "_")
                if dest not in actions or dest in ("help", "config", "func"):
                    raise UsageError(f"unknown key {key!r} in [{command}]")
                a = actions[dest]
                try:
                    if isinstance(a, argparse._StoreTrueAction):
                        val = cp.getboolean(command, key)
                    elif isinstance(a, argparse._AppendAction) or a.nargs == "+":
                        val = [a.type(x) if a.type else x for x in raw.split()]
                    else:
                        val = a.type(raw) if a.type else raw
                except ValueError as e:
                    raise UsageError(f"bad value for {key!r} in [{command}]: {e}") from None
                if a.choices is not None and val not in a.choices:
                    raise UsageError(f"bad value for {key!r} in [{command}]: {val!r}")
                defaults[dest] = val
                a.required = False
            sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    if getattr(args, "command", None) is None:
        raise UsageError("a subcommand is required")
    return args


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        args.func(args)
        return EXIT_OK
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", e, parser)
    except NumericalError as e:
        return _fail(EXIT_NUMERICAL, "numerical", e)
    except (DataError, OSError, ValueError, KeyError) as e:
        return _fail(EXIT_DATA, "data", e)
    except HoregError as e:
        return _fail(EXIT_DATA, "data", e)


def _fail(code, kind, exc, parser=None):
    if parser is not None and kind == "usage":
        parser.print_usage(sys.stderr)
    msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": msg}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
