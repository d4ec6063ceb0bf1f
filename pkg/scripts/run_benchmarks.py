#!/usr/bin/env python3
"""Run all four benchmark categories and drop plot-ready CSVs under results/.

Categories mirror the acceptance experiments: operator acceleration, FBP
initialization effect, coarse-to-fine convergence, worker scaling.  Sizes
default to desk scale; pass --small for a quick smoke pass.
"""

import argparse
import os
from pathlib import Path

from tomoforge import bench


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="results")
    parser.add_argument("--small", action="store_true",
                        help="tiny sizes for a smoke pass")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.small:
        sizes, side, slices, iters, workers = (32, 64), 64, 8, 2, (1, 2)
    else:
        sizes, side, slices, iters = (32, 64, 128, 256), 256, 32, 3
        workers = (1, 2, 4) if (os.cpu_count() or 1) >= 4 else (1, 2)

    print("== operator acceleration ==")
    for n, td, tt, rl, rg in bench.bench_toeplitz(out / "toeplitz.csv",
                                                  sizes=sizes, seed=args.seed):
        print(f"  N={n}: direct {td}s, kernel {tt}s, rel diff loss {rl} grad {rg}")

    print("== initialization effect ==")
    curves = bench.bench_init(out / "init.csv", side=side, seed=args.seed,
                              max_iters=40 if args.small else 80)
    r0 = {k: v[0].fidelity for k, v in curves.items()}
    print(f"  iteration-0 fidelity: fbp={r0['fbp']:.3e} zero={r0['zero']:.3e}")

    print("== coarse-to-fine ==")
    res = bench.bench_multires(out / "multires.csv", side=side, seed=args.seed,
                               single_iters=60 if args.small else 300,
                               fine_iters=20 if args.small else 60)
    print(f"  single {res['t_single']:.1f}s vs hierarchy {res['t_multi']:.1f}s")

    print("== worker scaling ==")
    times = bench.bench_scaling(out / "scaling.csv", workers=workers,
                                side=side // 2, slices=slices, iters=iters,
                                seed=args.seed)
    for w, t in times.items():
        print(f"  {w} worker(s): {t:.2f}s")
    print(f"CSVs in {out}/")


if __name__ == "__main__":
    main()
