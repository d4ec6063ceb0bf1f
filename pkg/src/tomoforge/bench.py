"""Benchmark harness: scaled-down analogs of the four experiment categories
(operator acceleration, initialization effect, coarse-to-fine convergence,
worker scaling), each emitting a plot-ready CSV with a metadata stamp.
"""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from .geometry import ScanGeometry, Sinogram, polar_sampling, shepp_logan
from .multires import GridHierarchy, solve_hierarchical
from .nufft import NufftPlan
from .qggmrf import QggmrfParams
from .radon import back_project, fbp, forward_project, project_volume
from .runtime import distributed_solve
from .solver import SolverConfig, estimate_lipschitz, solve
from .toeplitz import build_psf, fidelity_context, fidelity_grad, fidelity_loss
from .fileio import config_hash

__all__ = ["bench_toeplitz", "bench_init", "bench_multires", "bench_scaling"]


def _uniform_angles(count: int) -> np.ndarray:
    return np.linspace(0.0, np.pi, count, endpoint=False)


def _write_csv(path, columns, rows, metadata):
    from . import __version__

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": __version__, **metadata}
    meta.setdefault("config_hash", config_hash(metadata))
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def bench_toeplitz(out_csv, sizes=(32, 64, 128, 256), n_angles: int = 45,
                   seed: int = 0, repeats: int = 3):
    """Direct loss+gradient (projection pair) vs the convolution-kernel path.

    Emits runtime for both routes and their relative differences per size.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        geom = ScanGeometry(angles=_uniform_angles(n_angles), detector_bins=n, image_side=n)
        sampling = polar_sampling(geom)
        plan = NufftPlan(n, sampling, 1e-6)
        psf = build_psf(sampling, n)
        f = rng.standard_normal((n, n))
        g_rows = rng.standard_normal((n_angles, n))
        sino = Sinogram(angles=geom.angles, data=g_rows[None])
        ctx = fidelity_context(plan, psf, sino)

        t_direct = np.inf
        for _ in range(repeats):
            tic = time.perf_counter()
            resid = forward_project(plan, f).data[0] - g_rows
            loss_d = 0.5 * float(np.sum(resid**2))
            grad_d = back_project(plan, resid[None]).data
            t_direct = min(t_direct, time.perf_counter() - tic)

        t_toep = np.inf
        for _ in range(repeats):
            tic = time.perf_counter()
            loss_t = fidelity_loss(ctx, f)
            grad_t = fidelity_grad(ctx, f)
            t_toep = min(t_toep, time.perf_counter() - tic)

        rel_loss = abs(loss_t - loss_d) / abs(loss_d)
        rel_grad = float(np.linalg.norm(grad_t - grad_d) / np.linalg.norm(grad_d))
        rows.append([n, f"{t_direct:.6f}", f"{t_toep:.6f}",
                     f"{rel_loss:.3e}", f"{rel_grad:.3e}"])
    meta = {"seed": seed, "angles": n_angles, "sizes": list(sizes)}
    _write_csv(out_csv, ("N", "direct_s", "toeplitz_s", "rel_diff_loss", "rel_diff_grad"),
               rows, meta)
    return rows


def make_noisy_sinogram(side: int, n_angles: int, noise_rms: float, seed: int,
                        detector_bins: int | None = None):
    """Shepp-Logan projection data with additive Gaussian noise (fixed seed).

    The detector defaults to twice the grid side so the object is inscribed
    with margin (keeps the circular ramp-filter wraparound negligible for the
    FBP-based comparisons)."""
    bins = detector_bins or 2 * side
    geom = ScanGeometry(angles=_uniform_angles(n_angles), detector_bins=bins,
                        image_side=side)
    sampling = polar_sampling(geom)
    plan = NufftPlan(side, sampling, 1e-6)
    phantom = shepp_logan(side)
    clean = forward_project(plan, phantom)
    rng = np.random.default_rng(seed)
    noisy = clean.data + noise_rms * rng.standard_normal(clean.data.shape)
    return plan, phantom, Sinogram(angles=geom.angles, data=noisy)


def bench_init(out_csv, side: int = 256, n_angles: int = 60, max_iters: int = 80,
               noise_rms: float = 0.5, lam: float = 5e-4, seed: int = 7):
    """Residual-vs-iteration curves for FBP versus zero initialization."""
    plan, phantom, sino = make_noisy_sinogram(side, n_angles, noise_rms, seed)
    psf = build_psf(plan.sampling, side)
    ctx = fidelity_context(plan, psf, sino)
    f_fbp = fbp(plan, sino)
    sigma = 0.1 * float(f_fbp.data.max() - f_fbp.data.min())
    params = QggmrfParams(sigma=sigma, lam=lam)
    cfg = SolverConfig(max_iters=max_iters, tol=1e-12,
                       lipschitz=estimate_lipschitz(psf, params))

    rows = []
    curves = {}
    for name, f0 in (("fbp", f_fbp), ("zero", np.zeros((side, side)))):
        _, records = solve(ctx, params, cfg, f0)
        curves[name] = records
        rows.extend([[name, r.iter, f"{r.fidelity:.17g}", f"{r.objective:.17g}",
                      int(r.restarted)] for r in records])
    meta = {"side": side, "angles": n_angles, "noise_rms": noise_rms,
            "lambda": lam, "sigma": sigma, "seed": seed}
    _write_csv(out_csv, ("init", "iter", "fidelity", "objective", "restarted"),
               rows, meta)
    return curves


def bench_multires(out_csv, side: int = 256, n_angles: int = 60,
                   single_iters: int = 300, fine_iters: int = 60,
                   noise_rms: float = 0.0, lam: float = 0.0, seed: int = 7):
    """Single-resolution vs 3-level coarse-to-fine convergence comparison."""
    plan, phantom, sino = make_noisy_sinogram(side, n_angles, noise_rms, seed)
    psf = build_psf(plan.sampling, side)
    ctx = fidelity_context(plan, psf, sino)
    if lam > 0:
        f_fbp = fbp(plan, sino)
        sigma = 0.1 * float(f_fbp.data.max() - f_fbp.data.min())
    else:
        sigma = 1.0
    params = QggmrfParams(sigma=sigma, lam=lam)

    cfg_single = SolverConfig(max_iters=single_iters, tol=1e-12)
    tic = time.perf_counter()
    _, rec_single = solve(ctx, params, cfg_single, np.zeros((side, side)))
    t_single = time.perf_counter() - tic

    hier = GridHierarchy(levels=(side // 4, side // 2, side),
                         iters_per_level=(4 * fine_iters, 2 * fine_iters, fine_iters))
    cfg_multi = SolverConfig(max_iters=fine_iters, tol=1e-12)
    tic = time.perf_counter()
    _, level_records = solve_hierarchical(sino, hier, params, cfg_multi,
                                          use_fbp_init=False)
    t_multi = time.perf_counter() - tic

    rows = [["single", 0, r.iter, f"{r.fidelity:.17g}", f"{r.objective:.17g}"]
            for r in rec_single]
    for lvl, recs in enumerate(level_records):
        rows.extend([["multi", lvl, r.iter, f"{r.fidelity:.17g}", f"{r.objective:.17g}"]
                     for r in recs])
    meta = {"side": side, "angles": n_angles, "single_iters": single_iters,
            "fine_iters": fine_iters, "seed": seed,
            "t_single_s": f"{t_single:.3f}", "t_multi_s": f"{t_multi:.3f}"}
    _write_csv(out_csv, ("run", "level", "iter", "fidelity", "objective"), rows, meta)
    return {"single": rec_single, "multi": level_records,
            "t_single": t_single, "t_multi": t_multi}


def bench_scaling(out_csv, workers=(1, 2, 4), side: int = 128, slices: int = 128,
                  n_angles: int = 45, iters: int = 3, lam: float = 1e-3, seed: int = 3):
    """Wall time of the slab-parallel solver per worker count (3D volume)."""
    geom = ScanGeometry(angles=_uniform_angles(n_angles), detector_bins=side,
                        image_side=side)
    sampling = polar_sampling(geom)
    plan = NufftPlan(side, sampling, 1e-6)
    phantom = shepp_logan(side, three_d=True, slices=slices)
    sino = project_volume(plan, phantom)
    params = QggmrfParams(sigma=0.1, lam=lam)
    cfg = SolverConfig(max_iters=iters, tol=1e-12)
    rows = []
    times = {}
    for w in workers:
        tic = time.perf_counter()
        distributed_solve(sino, side, params, cfg, w)
        times[w] = time.perf_counter() - tic
        rows.append([w, f"{times[w]:.3f}"])
    meta = {"side": side, "slices": slices, "angles": n_angles, "iters": iters,
            "lambda": lam, "seed": seed}
    _write_csv(out_csv, ("workers", "wall_s"), rows, meta)
    return times
