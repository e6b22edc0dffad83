"""Command-line entry point wiring the library end to end.

Subcommands: phantom, corrupt, train, infer, eval, analyze-context, bench.
Configuration comes from an optional ``key = value`` file plus ``--set``
overrides; every run validates divisibility constraints before doing work.
Report-producing commands can render PNG figures next to their text output
via ``--figures DIR``. The only environment variable honored is
``VOLRAC_THREADS`` (worker threads for the parallel benchmark path).
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .artifacts import ArtifactConfig, bernoulli_process, read_recipe, replay, write_recipe
from .bench import bench_attention_layer, bench_permute, format_bench_table
from .config import ConfigError, load_run_config
from .metrics import MetricReport, dice_delta, otsu_mask, psnr, ssim3
from .model import CheckpointError, forward, load_checkpoint
from .train import load_opt_state, train
from .volume import PhantomSpec, Volume, VolumeFormatError, generate_phantom, read_volume, write_volume
from .windows import SCHEME_ALIASES, context_reachability, format_context_report


def _threads() -> int:
    raw = os.environ.get("VOLRAC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _figures_dir(args) -> Path | None:
    if getattr(args, "figures", None) is None:
        return None
    d = Path(args.figures)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _run_config(args):
    return load_run_config(getattr(args, "config", None), getattr(args, "set", None))


# -- subcommands -----------------------------------------------------------------


def cmd_phantom(args) -> int:
    if args.size < 8:
        raise ConfigError(f"phantom side must be >= 8, got {args.size}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        spec = PhantomSpec(
            seed=args.seed + i,
            side=args.size,
            n_ellipsoids=args.ellipsoids,
            background_order=args.background_order,
        )
        write_volume(generate_phantom(spec), out / f"phantom_{i:03d}.vol")
    print(f"wrote {args.count} phantom volumes to {out}")
    return 0


def cmd_corrupt(args) -> int:
    v = read_volume(args.infile)
    if args.replay:
        recipe = read_recipe(args.replay)
        corrupted = replay(recipe, v)
    else:
        cfg = ArtifactConfig(probabilities=(args.probability,) * 8, seed=args.seed)
        corrupted, recipe = bernoulli_process(v, cfg, seed=args.seed)
        if args.recipe_out:
            write_recipe(recipe, args.recipe_out)
    write_volume(corrupted, args.out)
    fired = [e.kind for e in recipe.entries if e.fired]
    print(f"corrupted {args.infile} -> {args.out} fired=[{','.join(fired) or '-'}]")
    figdir = _figures_dir(args)
    if figdir is not None:
        from .report import save_volume_montage

        save_volume_montage(corrupted, figdir / "corrupted.png", title="corrupted volume")
        print(f"figure: {figdir / 'corrupted.png'}")
    return 0


def _load_dataset(args, run) -> list[Volume]:
    if args.data:
        paths = sorted(Path(args.data).glob("*.vol"))
        if not paths:
            raise ConfigError(f"no .vol files found in {args.data}")
        vols = [read_volume(p) for p in paths]
    else:
        vols = [
            generate_phantom(
                PhantomSpec(
                    seed=run.train.seed + i,
                    side=run.model.side,
                    n_ellipsoids=run.phantom_ellipsoids,
                    background_order=run.phantom_background_order,
                )
            )
            for i in range(args.phantoms)
        ]
    for v in vols:
        if v.side != run.model.side:
            raise ConfigError(f"dataset volume side {v.side} does not match model side {run.model.side}")
    return vols


def cmd_train(args) -> int:
    run = _run_config(args)
    vols = _load_dataset(args, run)
    out = Path(args.out)
    init = None
    if args.resume:
        params = load_checkpoint(out / "model.g2lc")
        state = load_opt_state(params, out / "optimizer.g2lo")
        start = args.resume_step if args.resume_step is not None else state.t
        init = (params, state, int(start))
    result = train(vols, run.model, run.optimizer, run.train, run.artifact, out, init=init)
    last = result.log_rows[-1] if result.log_rows else None
    if last is not None:
        print(f"finished step={last[0]} train_loss={last[1]:.6e} test_psnr={last[2]:.4f} test_ssim={last[3]:.6f}")
    print(f"checkpoint: {out / 'model.g2lc'}")
    print(f"metric log: {out / 'metrics.tsv'}")
    figdir = _figures_dir(args)
    if figdir is not None and result.log_rows:
        from .report import save_training_curves

        save_training_curves(result.log_rows, figdir / "training_curves.png")
        print(f"figure: {figdir / 'training_curves.png'}")
    return 0


def cmd_infer(args) -> int:
    params = load_checkpoint(args.checkpoint)
    v = read_volume(args.infile)
    recon = forward(v, params, g2l_route=args.route)
    write_volume(recon, args.out)
    print(f"inferred {args.infile} -> {args.out} (side {recon.side})")
    figdir = _figures_dir(args)
    if figdir is not None:
        from .report import save_volume_montage

        save_volume_montage(recon, figdir / "reconstruction.png", title="reconstruction")
        print(f"figure: {figdir / 'reconstruction.png'}")
    return 0


def cmd_eval(args) -> int:
    ref = read_volume(args.ref)
    test = read_volume(args.test)
    delta = None
    if args.mask_hf or args.mask_bap or args.mask_rac:
        if not (args.mask_hf and args.mask_bap and args.mask_rac):
            raise ConfigError("dice evaluation needs all three masks (hf, bap, rac)")
        masks = [_read_mask(p) for p in (args.mask_hf, args.mask_bap, args.mask_rac)]
        delta = dice_delta(*masks)
    elif args.otsu_corrupted:
        corrupted = read_volume(args.otsu_corrupted)
        delta = dice_delta(otsu_mask(ref), otsu_mask(corrupted), otsu_mask(test))
    report = MetricReport(psnr=psnr(ref, test), ssim=ssim3(ref, test), dice_delta=delta)
    print(report.format())
    figdir = _figures_dir(args)
    if figdir is not None:
        from .report import save_eval_triptych

        save_eval_triptych(ref, test, figdir / "eval_slices.png")
        print(f"figure: {figdir / 'eval_slices.png'}")
    return 0


def _read_mask(path):
    from .metrics import BinaryMask

    v = read_volume(path)
    return BinaryMask(v.side, v.data > 0.5)


def cmd_analyze_context(args) -> int:
    schedule = [s.strip() for s in args.schedule.split(",") if s.strip()] * args.repeat
    if not schedule:
        raise ConfigError("schedule must name at least one scheme")
    for kind in schedule:
        if SCHEME_ALIASES.get(kind.lower()) is None:
            raise ConfigError(f"unknown window scheme {kind!r}")
    if args.grid_side % args.window != 0:
        raise ConfigError(f"window length W={args.window} must divide grid side M={args.grid_side}")
    for line in format_context_report(args.grid_side, args.window, args.dims, schedule):
        print(line)
    figdir = _figures_dir(args)
    if figdir is not None:
        from .report import save_context_growth

        sizes = context_reachability(args.grid_side, args.window, args.dims, schedule)
        save_context_growth(sizes, schedule, args.grid_side**args.dims, figdir / "context_growth.png")
        print(f"figure: {figdir / 'context_growth.png'}")
    return 0


def cmd_bench(args) -> int:
    run = _run_config(args)
    results = []
    if args.scenario in ("permute", "all"):
        results.extend(
            bench_permute(args.grid_side, args.window, args.dims, run.model.embed, reps=args.reps)
        )
    if args.scenario in ("attention", "all"):
        results.extend(
            bench_attention_layer(run.model, reps=args.reps, parallel=args.parallel, threads=_threads())
        )
    for line in format_bench_table(results):
        print(line)
    figdir = _figures_dir(args)
    if figdir is not None:
        from .report import save_bench_chart

        save_bench_chart(results, figdir / "bench.png")
        print(f"figure: {figdir / 'bench.png'}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volrac",
        description="Volumetric windowed-transformer artifact correction toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("phantom", help="generate synthetic test volumes")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--ellipsoids", type=int, default=4)
    p.add_argument("--background-order", type=int, default=2)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("corrupt", help="apply the stochastic artifact process")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probability", type=float, default=0.125)
    p.add_argument("--recipe-out", help="write the replayable recipe here")
    p.add_argument("--replay", help="replay a recorded recipe instead of sampling")
    p.add_argument("--figures", help="directory for PNG figures")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="train the artifact-correction model")
    add_common(p)
    p.add_argument("--data", help="directory of VOL1 volumes (clean)")
    p.add_argument("--phantoms", type=int, default=8, help="generate this many phantoms if no --data")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from checkpoint in --out")
    p.add_argument("--resume-step", type=int, default=None)
    p.add_argument("--figures", help="directory for PNG figures")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint on a volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--route", choices=("compact", "gather"), default="compact")
    p.add_argument("--figures", help="directory for PNG figures")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metric report for (reference, test)")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mask-hf", help="binary mask VOL1 of the high-fidelity volume")
    p.add_argument("--mask-bap", help="binary mask VOL1 of the corrupted volume")
    p.add_argument("--mask-rac", help="binary mask VOL1 of the corrected volume")
    p.add_argument("--otsu-corrupted", help="corrupted volume; derive all three masks via Otsu")
    p.add_argument("--figures", help="directory for PNG figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-context", help="layered window-reachability analysis")
    p.add_argument("--grid-side", type=int, required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--dims", type=int, choices=(1, 2, 3), default=2)
    p.add_argument("--schedule", required=True, help="comma list of schemes, e.g. w,g2l")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--figures", help="directory for PNG figures")
    p.set_defaults(func=cmd_analyze_context)

    p = sub.add_parser("bench", help="micro-benchmarks")
    add_common(p)
    p.add_argument("--scenario", choices=("permute", "attention", "all"), default="all")
    p.add_argument("--grid-side", type=int, default=16)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--dims", type=int, choices=(1, 2, 3), default=3)
    p.add_argument("--reps", type=int, default=9)
    p.add_argument("--parallel", action="store_true", help="thread-parallel window path")
    p.add_argument("--figures", help="directory for PNG figures")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (VolumeFormatError, CheckpointError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
