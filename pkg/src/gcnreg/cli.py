"""Command-line entry point: gen, train, register, sweep, gradcheck, selftest.

Exit codes: 0 success, 1 contract/format/usage error, 2 failed verification.
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from .benchgen import ChallengeSpec, format_manifest, make_pair, parse_manifest
from .datasets import materialize_synthetic, model_clouds, off_paths, sample_model
from .errors import ContractError, FormatError, ParseError
from .evaluation import AXES, DEFAULT_LEVELS, SweepSpec, compare_sweep, emit_svg, mean_euclidean, run_sweep
from .geometry import knn, load_xyz, save_xyz
from .matching import register
from .rng import derive_seed
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for failed verification
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    p = _Parser(prog="gcnreg", description="Learned non-rigid point cloud registration.")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config file)")
    p.add_argument("--config", help="config text file with [train], [descriptor] and [lbp] sections")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread budget (1 is the reference)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def models_args(sp):
        sp.add_argument("--models", help="directory of .off meshes (synthetic primitives when omitted)")
        sp.add_argument("--count", type=int, default=20, help="number of models")
        sp.add_argument("--points", type=int, help="points sampled per model (default: [train] n_points)")

    g = sub.add_parser("gen", help="write a benchmark manifest and its pair files")
    models_args(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--pairs", type=int, default=1, help="pairs per model")
    for name, field in AXES.items():
        g.add_argument(f"--{name}", type=float, default=0.0, dest=field, help=f"{name} level")
    g.add_argument("--n-controls", type=int, default=5)

    t = sub.add_parser("train", help="train descriptor weights")
    models_args(t)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="loss log CSV (default: <out>.loss.csv)")
    t.add_argument("--steps", type=int, help="samples per epoch")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--max-deform", type=float)
    t.add_argument("--max-rotation", type=float)
    t.add_argument("--kc", type=int, help="candidates per point")
    t.add_argument("--no-align", action="store_true", help="train the baseline without the alignment transform")
    t.add_argument("--resume", help="continue from this checkpoint")

    r = sub.add_parser("register", help="warp a source cloud onto a target cloud")
    r.add_argument("--source", required=True, help="source .xyz")
    r.add_argument("--target", required=True, help="target .xyz")
    r.add_argument("--ckpt", required=True, help="checkpoint")
    r.add_argument("--out", help="warped cloud .xyz (default: <source>.warped.xyz)")
    r.add_argument("--gt", help="file of target indices, one per source point, for the ground-truth distance")
    r.add_argument("--kc", type=int)

    s = sub.add_parser("sweep", help="robustness sweep over one challenge axis")
    models_args(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--baseline-ckpt", help="also sweep this no-alignment checkpoint and chart both")
    s.add_argument("--axis", choices=sorted(AXES), default="deformation")
    s.add_argument("--levels", type=_floats, help="comma-separated levels")
    s.add_argument("--trials", type=int, default=5)
    s.add_argument("--out", required=True, help="output prefix for the CSV and SVG")
    for name, field in AXES.items():
        s.add_argument(f"--fixed-{name}", type=float, default=0.0, dest=f"fixed_{field}", help=f"{name} held fixed")
    s.add_argument("--kc", type=int)
    s.add_argument("--no-timing", action="store_true", help="write zero timings so CSVs are byte-reproducible")

    c = sub.add_parser("gradcheck", help="finite-difference check of the whole pipeline")
    c.add_argument("--trials", type=int, default=1, help="independent instances (seeds seed..seed+trials-1)")
    c.add_argument("--max-coords", type=int, default=16, help="coordinates sampled per tensor")
    c.add_argument("--tolerance", type=float, default=1e-5)

    sub.add_parser("selftest", help="run the built-in oracles")
    return p


def _train_config(args):
    cfg = TrainConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = TrainConfig.from_text(fh.read())
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _print_config(cfg, extra=None, out=print):
    out(f"# seed = {cfg.seed}")
    for k, v in (extra or {}).items():
        out(f"# {k} = {v}")
    for line in cfg.to_text().splitlines():
        out(f"# {line}" if line else "#")


def cmd_gen(args, cfg):
    args.points = args.points or cfg.n_points
    _print_config(cfg, {"points": args.points, "count": args.count, "pairs": args.pairs})
    os.makedirs(args.out, exist_ok=True)
    if args.models:
        paths = off_paths(args.models)[: args.count]
        if not paths:
            raise ContractError(f"no .off files under {args.models}")
    else:
        paths = materialize_synthetic(os.path.join(args.out, "models"), args.count, cfg.seed)
    levels = {f: getattr(args, f) for f in AXES.values()}
    entries = []
    for mi, path in enumerate(paths):
        for pi in range(args.pairs):
            spec = ChallengeSpec(n_controls=args.n_controls, seed=derive_seed(cfg.seed, "gen", mi, pi), **levels)
            spec.validate()
            entries.append((path, spec))
    manifest = os.path.join(args.out, "manifest.csv")
    with open(manifest, "w", encoding="ascii", newline="") as fh:
        fh.write(format_manifest(entries))
    write_pairs(parse_manifest(format_manifest(entries)), args.out, args.points, cfg.seed)
    print(f"wrote {manifest} with {len(entries)} pairs")
    return EXIT_OK


def write_pairs(entries, out_dir, n_points, seed):
    """Materialise manifest entries as pair_NNNN.{source,target}.xyz and .gt files."""
    for i, (path, spec) in enumerate(entries):
        pair = make_pair(sample_model(path, n_points, seed), spec)
        stem = os.path.join(out_dir, f"pair_{i:04d}")
        save_xyz(pair.source, f"{stem}.source.xyz")
        save_xyz(pair.target, f"{stem}.target.xyz")
        np.savetxt(f"{stem}.gt", pair.gt_map, fmt="%d")


def cmd_train(args, cfg):
    desc = cfg.descriptor
    if args.no_align:
        desc = replace(desc, with_alignment=False)
    overrides = {
        "samples_per_epoch": args.steps,
        "epochs": args.epochs,
        "learning_rate": args.lr,
        "max_deform": args.max_deform,
        "max_rotation": args.max_rotation,
        "n_points": args.points,
    }
    cfg = replace(cfg, descriptor=desc, **{k: v for k, v in overrides.items() if v is not None})
    if args.kc is not None:
        cfg = replace(cfg, lbp=replace(cfg.lbp, k_candidates=args.kc))
    params = state = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        params, state = ck.params(), ck.adam_state()
    _print_config(cfg, {"models": args.models or "synthetic", "count": args.count})
    clouds = [c for _, c in model_clouds(args.models, args.count, cfg.n_points, cfg.seed)]

    def progress(step, value):
        if step % 25 == 0:
            print(f"step {step} loss {value:.6f}", flush=True)

    log_path = args.log or f"{args.out}.loss.csv"
    params, state, losses = train(clouds, cfg, params, state, log_path=log_path, progress=progress)
    save_checkpoint(Checkpoint.from_training(params, state, cfg), args.out)
    print(f"wrote {args.out} and {log_path} after {state.step} steps")
    return EXIT_OK


def _model_from_checkpoint(path, kc=None, baseline=False):
    ck = load_checkpoint(path)
    cfg = TrainConfig.from_text(ck.config) if ck.config else TrainConfig()
    desc, lbp = cfg.descriptor, cfg.lbp
    if kc is not None:
        lbp = replace(lbp, k_candidates=kc)
    if baseline:
        desc = replace(desc, with_alignment=False)
    return ck.params(requires_grad=False), desc, lbp, cfg


def cmd_register(args, cfg):
    params, desc, lbp, ck_cfg = _model_from_checkpoint(args.ckpt, args.kc)
    _print_config(replace(ck_cfg, seed=cfg.seed, descriptor=desc, lbp=lbp))
    source, target = load_xyz(args.source), load_xyz(args.target)
    result = register(source, target, params, desc, lbp)
    out = args.out or f"{os.path.splitext(args.source)[0]}.warped.xyz"
    save_xyz(result.warped, out)
    nearest = knn(result.warped, target.points, 1)[:, 0]
    nn_dist = float(np.linalg.norm(result.warped - target.points[nearest], axis=1).mean())
    print(f"wrote {out}")
    print(f"mean_nn_distance {nn_dist:.6f}")
    if args.gt:
        gt = np.loadtxt(args.gt, dtype=np.int64, ndmin=1)
        if len(gt) != len(source.points) or gt.min() < 0 or gt.max() >= len(target.points):
            raise ContractError("ground-truth index file does not match the clouds")
        before = mean_euclidean(source.points, target.points[gt])
        print(f"mean_distance_before {before:.6f}")
        print(f"mean_distance {mean_euclidean(result.warped, target.points[gt]):.6f}")
    print(f"time_ms {result.elapsed_ms:.1f}")
    return EXIT_OK


def cmd_sweep(args, cfg):
    args.points = args.points or cfg.n_points
    params, desc, lbp, ck_cfg = _model_from_checkpoint(args.ckpt, args.kc)
    fixed = ChallengeSpec(**{f: getattr(args, f"fixed_{f}") for f in AXES.values()})
    spec = SweepSpec(
        axis=args.axis,
        levels=args.levels or DEFAULT_LEVELS[args.axis],
        trials=args.trials,
        fixed=fixed,
        seed=cfg.seed,
        record_timing=not args.no_timing,
    )
    _print_config(replace(ck_cfg, seed=cfg.seed, descriptor=desc, lbp=lbp), {"sweep": spec})
    clouds = [c for _, c in model_clouds(args.models, args.count, args.points, cfg.seed)]
    if args.baseline_ckpt:
        base_params, *_ = _model_from_checkpoint(args.baseline_ckpt, args.kc, baseline=True)
        aligned, base = compare_sweep(spec, clouds, params, base_params, args.out, desc, lbp)
        rows = aligned
        print(f"wrote {args.out}_aligned.csv, {args.out}_baseline.csv and {args.out}.svg")
    else:
        rows = run_sweep(spec, clouds, params, desc, lbp, csv_path=f"{args.out}.csv")
        emit_svg(rows, f"{args.out}.svg", title=f"{args.axis} sweep")
        print(f"wrote {args.out}.csv and {args.out}.svg")
    for r in rows:
        print(f"{r.axis} {r.level:g}: before {r.before_mean:.4f} after {r.after_mean:.4f} ({r.time_ms_mean:.0f} ms)")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_pipeline_check

    print(f"# seed = {cfg.seed}")
    print(f"# trials = {args.trials}, max_coords = {args.max_coords}, tolerance = {args.tolerance:g}")
    worst, ok = 0.0, True
    for t in range(args.trials):
        report = run_pipeline_check(seed=cfg.seed + t, max_coords=args.max_coords)
        for tr in report.tensors:
            print(f"  {tr.name}: checked {tr.checked}, skipped {tr.skipped}, rel error {tr.rel_error:.2e}")
        print(f"instance {cfg.seed + t}: max relative error {report.max_rel_error:.2e} "
              f"({report.checked} checked, {report.skipped} skipped at ties)")
        worst = max(worst, report.max_rel_error)
        ok &= report.checked > 0
    ok &= worst <= args.tolerance
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {worst:.2e} (tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_selftest(args, cfg):
    from .selftest import run_all

    print(f"# seed = {cfg.seed}")
    ok = run_all()
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAILED


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "register": cmd_register,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def dispatch(argv=None):
    """Run one invocation and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_ERROR
    if args.command is None:
        print(parser.format_help(), file=sys.stderr)
        return EXIT_ERROR
    if args.threads < 1:
        print("gcnreg: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        with threadpool_limits(limits=args.threads):
            print(f"# threads = {args.threads}")
            return COMMANDS[args.command](args, _train_config(args))
    except (ContractError, FormatError, ParseError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"gcnreg: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
