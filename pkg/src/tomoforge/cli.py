"""Batch command-line interface.

Subcommands: ``phantom`` (generate test objects), ``project`` (forward model),
``mbir`` (iterative reconstruction), ``bench`` (experiment harness).

Exit codes: 0 success, 2 bad arguments, 3 numerical failure, 4 I/O failure.
The ``TOMOFORGE_THREADS`` environment variable caps the worker count.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .geometry import ImageGrid, ScanGeometry, Volume, disk_phantom, polar_sampling, shepp_logan
from .fileio import export_slice, load_array, load_plan, save_array, write_convergence_csv
from .multires import GridHierarchy, default_hierarchy, solve_hierarchical
from .nufft import NufftPlan
from .radon import fbp, forward_project, project_volume
from .runtime import distributed_solve
from .solver import solve
from .toeplitz import build_psf, fidelity_context
from . import bench as bench_mod

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _worker_cap(requested: int) -> int:
    cap = os.environ.get("TOMOFORGE_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            raise ValueError(f"TOMOFORGE_THREADS must be an integer, got {cap!r}") from None
    return requested


def _uniform_angles(count: int) -> np.ndarray:
    if count < 1:
        raise ValueError("angle count must be positive")
    return np.linspace(0.0, np.pi, count, endpoint=False)


def _cmd_phantom(args) -> int:
    if args.kind == "shepp-logan":
        obj = shepp_logan(args.side, three_d=args.slices > 1, slices=args.slices)
    else:
        radius = args.radius if args.radius is not None else args.side / 4
        obj = disk_phantom(args.side, radius, args.value)
        if args.slices > 1:
            obj = Volume(np.repeat(obj.data[None], args.slices, axis=0))
    save_array(args.out, obj)
    print(f"wrote {args.kind} phantom ({args.side} px, {args.slices} slice(s)) to {args.out}")
    return EXIT_OK


def _cmd_project(args) -> int:
    obj = load_array(args.input)
    if not isinstance(obj, (ImageGrid, Volume)):
        raise ValueError("project expects an image or volume file")
    side = obj.side
    geom = ScanGeometry(angles=_uniform_angles(args.angles),
                        detector_bins=args.bins, image_side=side)
    plan = NufftPlan(side, polar_sampling(geom), args.tolerance)
    sino = project_volume(plan, obj) if isinstance(obj, Volume) else forward_project(plan, obj)
    save_array(args.out, sino)
    print(f"wrote sinogram ({args.angles} angles x {args.bins} bins) to {args.out}")
    return EXIT_OK


def _cmd_mbir(args) -> int:
    plan_cfg = load_plan(args.plan)
    sino = load_array(args.sino)
    side = plan_cfg.image_side
    if sino.detector_bins < side:
        raise ValueError("detector does not cover the requested grid")
    geom = ScanGeometry(angles=sino.angles, detector_bins=sino.detector_bins,
                        image_side=side)
    sampling = polar_sampling(geom)
    recon_plan = NufftPlan(side, sampling, plan_cfg.nufft_tolerance, plan_cfg.oversampling)

    f_fbp = None
    if args.init == "fbp" or plan_cfg.sigma_auto:
        f_fbp = fbp(recon_plan, sino)
    if plan_cfg.sigma_auto:
        rng_width = float(f_fbp.data.max() - f_fbp.data.min())
        if rng_width <= 0:
            rng_width = 1.0
        params = plan_cfg.resolve_params(0.1 * rng_width)
    else:
        params = plan_cfg.qggmrf

    levels = args.levels if args.levels is not None else plan_cfg.levels
    workers = _worker_cap(args.workers if args.workers is not None else plan_cfg.workers)
    rows = []

    if levels is not None and levels > 1:
        if plan_cfg.iters_per_level is not None:
            hier = GridHierarchy(
                levels=tuple(side >> (levels - 1 - i) for i in range(levels)),
                iters_per_level=plan_cfg.iters_per_level)
        else:
            hier = default_hierarchy(side, n_levels=levels,
                                     finest_iters=plan_cfg.solver.max_iters)
        recon, level_records = solve_hierarchical(
            sino, hier, params, plan_cfg.solver,
            use_fbp_init=(args.init == "fbp"),
            downsample_angles=plan_cfg.downsample_angles,
            nufft_tolerance=plan_cfg.nufft_tolerance,
            oversampling=plan_cfg.oversampling)
        for lvl, recs in enumerate(level_records):
            rows.extend((r, lvl, 1) for r in recs)
    elif workers > 1:
        if sino.slices < workers:
            raise ValueError("more workers than slices")
        f0 = f_fbp if args.init == "fbp" else None
        if isinstance(f0, ImageGrid):
            f0 = Volume(f0.data[None])
        recon, records = distributed_solve(
            sino, side, params, plan_cfg.solver, workers, f0=f0,
            nufft_tolerance=plan_cfg.nufft_tolerance,
            oversampling=plan_cfg.oversampling)
        rows.extend((r, 0, workers) for r in records)
    else:
        psf = build_psf(sampling, side, plan_cfg.nufft_tolerance, plan_cfg.oversampling)
        ctx = fidelity_context(recon_plan, psf, sino)
        if args.init == "fbp":
            f0 = f_fbp
        elif plan_cfg.init_volume is not None:
            f0 = load_array(plan_cfg.init_volume)
        elif sino.slices > 1:
            f0 = Volume(np.zeros((sino.slices, side, side)))
        else:
            f0 = ImageGrid(np.zeros((side, side)))
        recon, records = solve(ctx, params, plan_cfg.solver, f0)
        rows.extend((r, 0, 1) for r in records)

    save_array(args.out, recon)
    if args.log:
        write_convergence_csv(args.log, rows, {
            "seed": plan_cfg.seed, "image_side": side, "init": args.init,
            "levels": levels or 1, "workers": workers, "lambda": params.lam,
            "sigma": params.sigma,
        })
    if args.export_png:
        out = export_slice(args.export_png, recon)
        print(f"exported slice to {out}")
    final = rows[-1][0] if rows else None
    if final is not None:
        print(f"finished: {final.iter} iterations, objective {final.objective:.6e}")
    print(f"wrote reconstruction to {args.out}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    if args.category == "toeplitz":
        rows = bench_mod.bench_toeplitz(args.out, sizes=tuple(args.sizes),
                                        n_angles=args.angles, seed=args.seed)
        for n, td, tt, rl, rg in rows:
            print(f"N={n}: direct={td}s toeplitz={tt}s rel_loss={rl} rel_grad={rg}")
    elif args.category == "init":
        curves = bench_mod.bench_init(args.out, side=args.side, n_angles=args.angles,
                                      max_iters=args.iters, seed=args.seed)
        r0 = {k: v[0].fidelity for k, v in curves.items()}
        print(f"iteration-0 fidelity: fbp={r0['fbp']:.4e} zero={r0['zero']:.4e} "
              f"ratio={r0['zero'] / r0['fbp']:.2f}")
    elif args.category == "multires":
        res = bench_mod.bench_multires(args.out, side=args.side, n_angles=args.angles,
                                       seed=args.seed)
        print(f"single-level {res['t_single']:.2f}s vs hierarchy {res['t_multi']:.2f}s")
    else:
        workers = [_worker_cap(w) for w in args.workers]
        times = bench_mod.bench_scaling(args.out, workers=workers, side=args.side,
                                        slices=args.slices, iters=args.iters,
                                        seed=args.seed)
        for w, t in times.items():
            print(f"workers={w}: {t:.2f}s")
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tomoforge",
                                     description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"tomoforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a test object file")
    p.add_argument("--kind", choices=("shepp-logan", "disk"), required=True)
    p.add_argument("--side", type=int, required=True)
    p.add_argument("--slices", type=int, default=1)
    p.add_argument("--radius", type=float, default=None, help="disk radius (pixels)")
    p.add_argument("--value", type=float, default=1.0, help="disk intensity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("project", help="forward-project a volume file")
    p.add_argument("--input", required=True)
    p.add_argument("--angles", type=int, required=True, help="uniform angles in [0, pi)")
    p.add_argument("--bins", type=int, required=True)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("mbir", help="model-based iterative reconstruction")
    p.add_argument("--sino", required=True)
    p.add_argument("--plan", required=True, help="TOML reconstruction plan")
    p.add_argument("--out", required=True)
    p.add_argument("--init", choices=("fbp", "zero"), default="fbp")
    p.add_argument("--levels", type=int, default=None, help="multi-resolution levels")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--log", default=None, help="write per-iteration CSV")
    p.add_argument("--export-png", default=None, help="export center slice preview")
    p.set_defaults(func=_cmd_mbir)

    p = sub.add_parser("bench", help="run a benchmark category")
    p.add_argument("category", choices=("toeplitz", "init", "multires", "scaling"))
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128, 256])
    p.add_argument("--side", type=int, default=256)
    p.add_argument("--slices", type=int, default=32)
    p.add_argument("--angles", type=int, default=60)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
