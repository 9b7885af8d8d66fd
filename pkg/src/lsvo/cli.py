"""Command-line front end: ``lsvo <subcommand> [options]``.

Every subcommand writes into its own ``--out`` directory (refused if it
already holds files, unless ``--force``) and records the effective settings
there as ``config.txt``.  That file can be passed back with ``--config`` to
repeat the run.  Exit status: 0 success, 1 contract / usage error, 2 I/O or
file-format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import export_trajectory, gnuplot_script, trajectory_errors
from .flowio import (FlowEncoding, FlowFormatError, PoseFormatError, gaussian_blur, load_flows,
                     make_subsampled_manifest, parse_poses, read_config, read_flo, read_manifest, write_config,
                     write_flo, write_manifest)
from .geometry import compose_trajectory
from .gradsuite import run_suite
from .losses import TrainConfig
from .models import CheckpointError, build_model, describe, load_checkpoint
from .pca import compare_subspaces, fit as pca_fit, load_model as load_pca, save_model as save_pca
from .synthflow import Camera, DepthModel, MotionSpec, generate_dataset
from .training import FlowData, train

log = logging.getLogger("lsvo")

# options that steer the invocation itself and never go into config.txt
_META = {"config", "out", "force", "verbose", "resume", "command", "pca_command", "_leaf", "_run"}


class ContractError(ValueError):
    """Bad arguments or inputs that violate a subcommand's preconditions."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors are contract errors here
        self.print_usage(sys.stderr)
        raise ContractError(message)


# ---------------------------------------------------------------- utilities
def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ContractError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise ContractError(f"size must be positive, got {text!r}")
    return h, w


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ContractError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ContractError(f"expected comma-separated numbers, got {text!r}") from None


def _need_file(path, what: str) -> Path:
    if path is None:
        raise ContractError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what}: no such file {p}")
    return p


def _open_out(args, allow_existing: bool = False) -> Path:
    if args.out is None:
        raise ContractError("--out is required")
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise ContractError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not (args.force or allow_existing):
        raise ContractError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(args, out: Path) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in _META and v is not None}
    write_config(cfg, out / "config.txt")
    log.info("effective config: %s", " ".join(f"{k}={cfg[k]}" for k in sorted(cfg)))


def _load_encoded(manifest_path: Path, size, bound: float):
    man = read_manifest(manifest_path)
    return man, load_flows(man, manifest_path.parent, size, FlowEncoding(bound))


# ------------------------------------------------------------- subcommands
def cmd_prepare(args) -> int:
    poses_path = _need_file(args.poses, "poses")
    subs = _int_list(args.subsample)
    if not subs or min(subs) < 1:
        raise ContractError("--subsample needs factors >= 1")
    if args.blur_radius < 0:
        raise ContractError("--blur-radius must be >= 0")
    if args.blur_radius and args.flow_dir is None:
        raise ContractError("--blur-radius needs --flow-dir holding the flows to blur")
    poses = parse_poses(poses_path)
    seq = args.sequence or poses_path.stem
    flow_dir = Path(args.flow_dir).resolve() if args.flow_dir else None
    name = (lambda i, j: str(flow_dir / f"{i:06d}_{j:06d}.flo")) if flow_dir else (lambda i, j: f"{i:06d}_{j:06d}.flo")
    manifests = {s: make_subsampled_manifest(range(len(poses)), poses, s, seq, args.frame_rate, name) for s in subs}

    out = _open_out(args)
    for s, man in manifests.items():
        write_manifest(man, out / f"{seq}_d{s}.txt")
        print(f"{seq}_d{s}: {len(man)} pairs")
        if args.blur_radius:
            bdir = out / f"blur{args.blur_radius}"
            bdir.mkdir(exist_ok=True)
            for r in man.records:
                flow = read_flo(r.flow_path)
                blurred = gaussian_blur(flow[None], args.blur_radius, channels_last=True, is_flow=True)[0]
                dst = bdir / Path(r.flow_path).name
                if not dst.exists():
                    write_flo(blurred, dst)
                r.flow_path = str(dst.resolve())
            write_manifest(man, out / f"{seq}_d{s}_blur{args.blur_radius}.txt")
    _echo_config(args, out)
    return 0


def cmd_synth(args) -> int:
    if args.n < 0:
        raise ContractError("--n must be >= 0")
    h, w = _size(args.size)
    camera = Camera(args.focal if args.focal is not None else float(w), h, w)
    params = tuple(_float_list(args.depth_params))
    depth = DepthModel(args.depth, params)
    depth.render(camera)  # validates positivity before anything is written
    spec = MotionSpec(scale=args.scale)
    out = _open_out(args)
    man = generate_dataset(args.n, spec, depth, camera, args.seed, out, noise=args.noise, name=args.name)
    _echo_config(args, out)
    print(f"{len(man)} samples -> {out / (args.name + '.txt')}")
    return 0


def cmd_train(args) -> int:
    if args.model not in ("lsvo", "stvo"):
        raise ContractError("--model must be lsvo or stvo")
    if args.train is None:
        raise ContractError("--train is required")
    size = _size(args.size)
    config = TrainConfig(beta=args.beta, lam=args.lam, lr=args.lr, batch_size=args.batch_size,
                         epochs=args.epochs, seed=args.seed, patience=args.patience)
    train_paths = [_need_file(p.strip(), "train") for p in args.train.split(",") if p.strip()]
    val_path = _need_file(args.val, "val") if args.val else None
    xs, ys = [], []
    for p in train_paths:
        man, x = _load_encoded(p, size, args.bound)
        xs.append(x)
        ys.append(man.labels)
    data = FlowData(np.concatenate(xs), np.concatenate(ys))
    val = None
    if val_path is not None:
        man, x = _load_encoded(val_path, size, args.bound)
        val = FlowData(x, man.labels)
    kw = {"variant": args.variant} if args.model == "stvo" else {}
    graph = build_model(args.model, (*size, 2), args.seed, args.width, **kw)

    out = _open_out(args, allow_existing=args.resume)
    _echo_config(args, out)
    (out / "model.txt").write_text(describe(graph) + "\n")
    result = train(graph, data, val, config, out_dir=out, resume=args.resume)
    print(f"best val loss_em {result.best_val:.6g} at epoch {result.best_epoch}"
          f"{' (early stop)' if result.stopped_early else ''}; checkpoint {result.best_checkpoint}")
    return 0


def cmd_predict(args) -> int:
    ckpt = _need_file(args.checkpoint, "checkpoint")
    man_path = _need_file(args.manifest, "manifest")
    graph, _ = load_checkpoint(ckpt)
    man, x = _load_encoded(man_path, graph.input_shape[:2], args.bound)
    motions = graph.predict(x, args.batch_size)["motion"] if len(x) else np.zeros((0, 6))
    out = _open_out(args)
    np.savetxt(out / "motions.txt", motions, fmt="%.17g")
    _echo_config(args, out)
    print(f"{len(motions)} motions -> {out / 'motions.txt'}")
    return 0


def _read_motions(path: Path) -> np.ndarray:
    try:
        m = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise ContractError(f"{path}: {exc}") from exc
    if m.size and m.shape[1] != 6:
        raise ContractError(f"{path}: expected 6 numbers per line, found {m.shape[1]}")
    return m.reshape(-1, 6)


def cmd_compose(args) -> int:
    motions = _read_motions(_need_file(args.motions, "motions"))
    gt = parse_poses(_need_file(args.gt, "gt")) if args.gt else None
    poses = compose_trajectory(motions)
    out = _open_out(args)
    _, xz = export_trajectory(poses, out / "trajectory.txt")
    curves = {"estimate": xz}
    if gt is not None:
        curves["ground truth"] = export_trajectory(gt, out / "ground_truth.txt")[1]
    (out / "trajectory.gp").write_text(gnuplot_script(curves, "trajectory.png"))
    _echo_config(args, out)
    print(f"{len(poses)} poses -> {out / 'trajectory.txt'}")
    return 0


def cmd_evaluate(args) -> int:
    est = parse_poses(_need_file(args.estimate, "estimate"))
    gt = parse_poses(_need_file(args.gt, "gt"))
    if len(est) != len(gt):
        raise ContractError(f"estimate has {len(est)} poses but ground truth has {len(gt)}")
    report = trajectory_errors(est, gt, args.frame_rate, step=args.step)
    out = _open_out(args)
    report.write_csv(out / "report.csv")
    for kind in ("length", "speed"):
        with open(out / f"by_{kind}.csv", "w") as f:
            f.write(f"{kind},trans_pct,rot_degpm,count\n")
            for k, key, t, r, c in report.rows():
                if k == kind:
                    f.write(f"{key},{t:.10g},{r:.10g},{c}\n")
    (out / "errors.gp").write_text(
        "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,400\n"
        "set output 'errors.png'\nset multiplot layout 1,2\n"
        "set xlabel 'path length [m]'\nplot 'by_length.csv' using 1:2 with linespoints title 'trans [%]'\n"
        "set xlabel 'speed [km/h]'\nplot 'by_speed.csv' using 1:2 with linespoints title 'trans [%]'\n"
        "unset multiplot\n")
    _echo_config(args, out)
    if report.too_short:
        print("warning: ground-truth path shorter than the shortest evaluation length; report is empty")
        return 0
    o = report.overall
    print(f"overall: {o.trans_pct:.4f} % translation, {o.rot_degpm:.6f} deg/m rotation over {o.count} segments")
    return 0


def cmd_pca_fit(args) -> int:
    man_path = _need_file(args.manifest, "manifest")
    size = _size(args.size)
    if args.l < 1:
        raise ContractError("--l must be >= 1")
    man = read_manifest(man_path)
    fields = load_flows(man, man_path.parent, size, enc=None)
    model = pca_fit(fields, args.l)
    out = _open_out(args)
    save_pca(model, out / "pca.model")
    np.savetxt(out / "singular_values.csv", model.singular_values, fmt="%.10g", header="singular_value", comments="")
    _echo_config(args, out)
    print(f"fitted l={args.l} on {len(fields)} fields -> {out / 'pca.model'}")
    return 0


def cmd_pca_compare(args) -> int:
    model = load_pca(_need_file(args.model, "model"))
    graph, _ = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    if "reconstruction" not in graph.outputs:
        raise ContractError("checkpoint has no auto-encoder branch (an LS-VO model is needed)")
    if tuple(model.shape[:2]) != tuple(graph.input_shape[:2]):
        raise ContractError(f"PCA model shape {model.shape} does not match network input {graph.input_shape}")
    man_path = _need_file(args.manifest, "manifest")
    man = read_manifest(man_path)
    fields = load_flows(man, man_path.parent, graph.input_shape[:2], enc=None)
    rows, summary = compare_subspaces(model, graph, fields, FlowEncoding(args.bound))
    out = _open_out(args)
    with open(out / "comparison.csv", "w") as f:
        f.write("index,pca_rmsle,ae_rmsle\n")
        for r in rows:
            f.write(f"{r.index},{r.pca:.10g},{r.ae:.10g}\n")
    _echo_config(args, out)
    print(f"mean RMSLE: PCA {summary['pca_mean']:.6g}, AE {summary['ae_mean']:.6g} over {len(rows)} fields")
    return 0


def cmd_gradcheck(args) -> int:
    seeds = range(args.seeds)
    reports = run_suite(seeds, tol=args.tol, include_graph=not args.layers_only)
    failed = [r for r in reports if not r.passed]
    lines = [str(r) for r in reports]
    if args.out is not None:
        out = _open_out(args)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
        _echo_config(args, out)
    for line in lines if args.verbose else [str(r) for r in failed]:
        print(line)
    worst = max((r.max_rel_error for r in reports), default=0.0)
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed, max relative error {worst:.3g}")
    return 1 if failed else 0


# ------------------------------------------------------------------ parser
def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--out", help="output directory" + (" (required)" if out_required else " (optional)"))
    g.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    g.add_argument("--config", help="key=value file supplying defaults for any option below")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lsvo", description="Latent-space visual odometry from dense optical flow.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    D = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("prepare", help="build d1/d2/d3 manifests (and blurred variants) from a pose file", formatter_class=D)
    p.add_argument("--poses", help="KITTI pose file, one 3x4 matrix per frame (required)")
    p.add_argument("--flow-dir", help="directory holding <i>_<j>.flo flows for the frame pairs")
    p.add_argument("--sequence", help="sequence id (default: pose file stem)")
    p.add_argument("--subsample", default="1,2,3", help="comma-separated sub-sample factors")
    p.add_argument("--frame-rate", type=float, default=10.0, help="source frame rate, Hz")
    p.add_argument("--blur-radius", type=int, default=0, help="also write flows blurred with this radius (0: none)")
    _common(p)
    p.set_defaults(_run=cmd_prepare, _leaf="prepare")

    p = sub.add_parser("synth", help="generate a synthetic flow dataset with known ego-motion", formatter_class=D)
    p.add_argument("--n", type=int, default=1000, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="base seed; sample i uses stream (seed, i)")
    p.add_argument("--scale", type=float, default=1.0, help="dynamics factor (1: d1, 2: d2, 3: d3)")
    p.add_argument("--size", default="94x300", help="flow size HxW")
    p.add_argument("--focal", type=float, help="focal length in pixels (default: 300 scaled with the width)")
    p.add_argument("--depth", default="ramp", help="depth model: constant | ramp")
    p.add_argument("--depth-params", default="6,20", help="constant: depth; ramp: top,bottom depth in metres")
    p.add_argument("--noise", type=float, default=0.0, help="std of additive flow noise, pixels")
    p.add_argument("--name", default="synth", help="manifest name")
    _common(p)
    p.set_defaults(_run=cmd_synth, _leaf="synth")

    p = sub.add_parser("train", help="train LS-VO or ST-VO on flow manifests", formatter_class=D)
    p.add_argument("--model", default="lsvo", help="lsvo | stvo")
    p.add_argument("--train", help="comma-separated training manifests (required)")
    p.add_argument("--val", help="validation manifest for early stopping")
    p.add_argument("--size", default="94x300", help="network input size HxW; flows are resized to it")
    p.add_argument("--width", type=float, default=1.0, help="channel multiplier")
    p.add_argument("--variant", default="ceil", help="ST-VO pooling interpretation: ceil | padded")
    p.add_argument("--bound", type=float, default=64.0, help="flow saturation bound F, pixels")
    for k in TrainConfig.keys():
        default = getattr(TrainConfig(), k)
        p.add_argument(f"--{k.replace('_', '-')}", type=type(default), default=default, help=f"training {k}")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in --out")
    _common(p)
    p.set_defaults(_run=cmd_train, _leaf="train")

    p = sub.add_parser("predict", help="run a checkpoint over a manifest and write motions", formatter_class=D)
    p.add_argument("--checkpoint", help="model checkpoint (required)")
    p.add_argument("--manifest", help="flow manifest (required)")
    p.add_argument("--bound", type=float, default=64.0, help="flow saturation bound F, pixels")
    p.add_argument("--batch-size", type=int, default=64, help="inference batch size")
    _common(p)
    p.set_defaults(_run=cmd_predict, _leaf="predict")

    p = sub.add_parser("compose", help="chain per-frame motions into a trajectory", formatter_class=D)
    p.add_argument("--motions", help="text file, 6 numbers per line (required)")
    p.add_argument("--gt", help="ground-truth pose file to plot alongside")
    _common(p)
    p.set_defaults(_run=cmd_compose, _leaf="compose")

    p = sub.add_parser("evaluate", help="relative trajectory errors over 100..800 m segments", formatter_class=D)
    p.add_argument("--estimate", help="estimated pose file (required)")
    p.add_argument("--gt", help="ground-truth pose file (required)")
    p.add_argument("--frame-rate", type=float, default=10.0, help="frame rate of the pose sequence, Hz")
    p.add_argument("--step", type=int, default=1, help="stride between segment start frames")
    _common(p)
    p.set_defaults(_run=cmd_evaluate, _leaf="evaluate")

    p = sub.add_parser("pca", help="linear flow subspace: fit | compare")
    psub = p.add_subparsers(dest="pca_command", parser_class=_Parser, metavar="ACTION")
    q = psub.add_parser("fit", help="fit a PCA subspace to the flows of a manifest", formatter_class=D)
    q.add_argument("--manifest", help="flow manifest (required)")
    q.add_argument("--l", type=int, default=32, help="subspace dimension")
    q.add_argument("--size", default="94x300", help="flows are resized to HxW before fitting")
    _common(q)
    q.set_defaults(_run=cmd_pca_fit, _leaf="pca fit")
    q = psub.add_parser("compare", help="PCA vs auto-encoder reconstruction error", formatter_class=D)
    q.add_argument("--model", help="pca.model file (required)")
    q.add_argument("--checkpoint", help="LS-VO checkpoint (required)")
    q.add_argument("--manifest", help="test manifest (required)")
    q.add_argument("--bound", type=float, default=64.0, help="flow saturation bound F, pixels")
    _common(q)
    q.set_defaults(_run=cmd_pca_compare, _leaf="pca compare")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss", formatter_class=D)
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    p.add_argument("--layers-only", action="store_true", help="skip the whole-network check")
    _common(p, out_required=False)
    p.set_defaults(_run=cmd_gradcheck, _leaf="gradcheck")
    return parser


def _leaf_parser(parser: argparse.ArgumentParser, path: str) -> argparse.ArgumentParser:
    node = parser
    for name in path.split():
        sub = next(a for a in node._actions if isinstance(a, argparse._SubParsersAction))
        node = sub.choices[name]
    return node


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "_leaf", None) is None:
        parser.print_help(sys.stderr)
        raise ContractError("a subcommand is required")
    if args.config:
        leaf = _leaf_parser(parser, args._leaf)
        known = {a.dest: a for a in leaf._actions if a.dest not in _META and a.option_strings}
        cfg = read_config(args.config)
        unknown = sorted(set(cfg) - set(known))
        if unknown:
            raise ContractError(f"{args.config}: unknown key(s) for '{args._leaf}': {', '.join(unknown)}")
        flags = [a for a in known.values() if isinstance(a, argparse._StoreTrueAction)]
        for a in flags:
            if a.dest in cfg:
                cfg[a.dest] = cfg[a.dest].lower() in ("1", "true", "yes")
        leaf.set_defaults(**cfg)  # string defaults are converted by each option's type
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args._run(args)
    except (FlowFormatError, PoseFormatError, CheckpointError, OSError) as exc:
        print(f"lsvo: error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, ValueError) as exc:
        print(f"lsvo: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
