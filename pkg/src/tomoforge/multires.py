"""Coarse-to-fine reconstruction: sinogram subsampling per level, windowed-sinc
upsampling of the estimate between levels, and the level-loop driver.

Each level halves the grid side (the coarsest may be a floor division of the
target).  Projection data are carried to a coarse level by striding detector
bins (and slices, in 3D) with a center-preserving start offset; values are
divided by the stride factor because line integrals measured in pixel units
shrink with the pixel size.  All projection angles are kept by default since
sparse angular coverage is what the solver targets; ``downsample_angles``
strides them as well.

Level transfer uses separable Lanczos interpolation (window a=3) with
per-output-sample weight normalization, so constants and already-aligned
grids are reproduced exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import ImageGrid, ScanGeometry, Sinogram, Volume, polar_sampling
from .nufft import NufftPlan
from .qggmrf import QggmrfParams
from .radon import fbp
from .solver import SolverConfig, solve
from .toeplitz import build_psf, fidelity_context

__all__ = [
    "GridHierarchy",
    "default_hierarchy",
    "downsample_sinogram",
    "lanczos_kernel",
    "upsample",
    "solve_hierarchical",
]

_LANCZOS_WINDOW = 3
_COARSEST_TARGET = 64


@dataclass(frozen=True)
class GridHierarchy:
    """Grid sides from coarsest to finest plus per-level iteration budgets."""

    levels: tuple
    iters_per_level: tuple
    window_a: int = _LANCZOS_WINDOW

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        object.__setattr__(self, "iters_per_level", tuple(int(v) for v in self.iters_per_level))
        if len(self.levels) < 1:
            raise ValueError("hierarchy needs at least one level")
        if any(b >= a for a, b in zip(self.levels[1:], self.levels[:-1])):
            raise ValueError("levels must be strictly increasing")
        if len(self.iters_per_level) != len(self.levels):
            raise ValueError("one iteration budget per level required")
        if any(v < 1 for v in self.iters_per_level):
            raise ValueError("iteration budgets must be positive")
        if self.window_a != _LANCZOS_WINDOW:
            raise ValueError("interpolation window is fixed at a=3")
        target = self.levels[-1]
        for i, side in enumerate(self.levels):
            if side != target >> (len(self.levels) - 1 - i):
                raise ValueError(
                    "levels must double toward the target side "
                    f"(level {i} should be {target >> (len(self.levels) - 1 - i)}, got {side})"
                )


def default_hierarchy(target_side: int, n_levels: int | None = None,
                      finest_iters: int | None = None) -> GridHierarchy:
    """Halving hierarchy whose coarsest grid lands in [64, 128) at desk scale.

    Iteration budgets halve with refinement from 200 at the coarsest level
    unless ``finest_iters`` pins the finest budget instead.
    """
    if n_levels is None:
        n_levels = 1
        while target_side >> n_levels >= _COARSEST_TARGET:
            n_levels += 1
    n_levels = max(1, min(n_levels, int(np.log2(max(target_side // 8, 1))) + 1))
    levels = [target_side >> (n_levels - 1 - i) for i in range(n_levels)]
    if finest_iters is not None:
        iters = [finest_iters * 2 ** (n_levels - 1 - i) for i in range(n_levels)]
    else:
        iters = [max(10, 200 >> i) for i in range(n_levels)]
    return GridHierarchy(levels=tuple(levels), iters_per_level=tuple(iters))


def _strided_indices(count: int, factor: int) -> np.ndarray:
    """Stride selection keeping the selected set centered on the array center."""
    reduced = -(-count // factor)
    start = max(0, ((count - 1) - factor * (reduced - 1)) // 2)
    idx = np.arange(start, count, factor)
    return idx


def downsample_sinogram(sino: Sinogram, factor: int,
                        downsample_angles: bool = False) -> Sinogram:
    """Subsample projection data to match a factor-times-coarser grid.

    Detector bins (and slices, when present) are strided with a
    center-preserving start; values are divided by ``factor`` to account for
    the larger pixels of the coarse grid.  Angles are kept unless
    ``downsample_angles`` is set.
    """
    if factor < 1 or (factor & (factor - 1)) != 0:
        raise ValueError(f"stride factor must be a power of 2, got {factor}")
    if factor > sino.detector_bins:
        raise ValueError("stride factor exceeds detector size")
    if factor == 1:
        return sino
    bins = _strided_indices(sino.detector_bins, factor)
    data = sino.data[:, :, bins] / factor
    angles = sino.angles
    if downsample_angles:
        keep = np.arange(0, angles.size, factor)
        angles = angles[keep]
        data = data[:, keep, :]
    if sino.slices > 1:
        data = data[_strided_indices(sino.slices, factor), :, :]
    return Sinogram(angles=angles, data=data)


def lanczos_kernel(x, a: int = _LANCZOS_WINDOW):
    """Windowed sinc L(x) = a sin(pi x) sin(pi x / a) / (pi x)^2, zero outside |x| < a.

    Exactly 1 at x = 0 and exactly 0 at the other integers inside the window.
    """
    if a < 1:
        raise ValueError("window parameter must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    inside = ax < a
    safe = np.where(inside & (ax > 0), x, 1.0)
    vals = a * np.sin(np.pi * safe) * np.sin(np.pi * safe / a) / (np.pi * safe) ** 2
    vals = np.where(ax == np.round(ax), 0.0, vals)  # integer zeros are exact
    vals = np.where(ax == 0, 1.0, vals)
    return np.where(inside, vals, 0.0)


def _lanczos_matrix(n_src: int, n_tgt: int, a: int) -> np.ndarray:
    """Dense interpolation operator mapping grid centers to grid centers.

    Off-grid weight rows are renormalized to sum 1; out-of-range taps are
    clamped to the edge sample.
    """
    ratio = n_src / n_tgt
    c_src = (n_src - 1) / 2.0
    c_tgt = (n_tgt - 1) / 2.0
    mat = np.zeros((n_tgt, n_src))
    for row in range(n_tgt):
        x = c_src + (row - c_tgt) * ratio
        lo = int(np.ceil(x - a))
        taps = np.arange(lo, int(np.floor(x + a)) + 1)
        w = lanczos_kernel(x - taps, a)
        keep = w != 0.0
        taps, w = taps[keep], w[keep]
        np.add.at(mat[row], np.clip(taps, 0, n_src - 1), w)
        mat[row] /= mat[row].sum()
    return mat


def upsample(img, target_side: int, target_slices: int | None = None):
    """Separable Lanczos-3 interpolation onto a finer grid (same kind out).

    ``target == source`` is an exact identity; constants are reproduced
    exactly by the per-sample weight normalization.
    """
    a = _LANCZOS_WINDOW
    if isinstance(img, ImageGrid):
        if target_side < img.side:
            raise ValueError("upsample cannot reduce the grid side; use the downsample path")
        m = _lanczos_matrix(img.side, target_side, a)
        return ImageGrid(m @ img.data @ m.T)
    if isinstance(img, Volume):
        if target_side < img.side:
            raise ValueError("upsample cannot reduce the grid side; use the downsample path")
        if target_slices is None:
            target_slices = int(round(img.slices * target_side / img.side))
        if target_slices < img.slices:
            raise ValueError("upsample cannot reduce the slice count")
        m = _lanczos_matrix(img.side, target_side, a)
        mz = _lanczos_matrix(img.slices, target_slices, a)
        out = np.einsum("zi,iyx->zyx", mz, img.data)
        out = np.einsum("yi,ziw->zyw", m, out)
        out = np.einsum("xi,zyi->zyx", m, out)
        return Volume(out)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return upsample(ImageGrid(arr), target_side).data
    return upsample(Volume(arr), target_side, target_slices).data


def solve_hierarchical(full_sino: Sinogram, hierarchy: GridHierarchy,
                       params: QggmrfParams, cfg: SolverConfig,
                       use_fbp_init: bool = False,
                       downsample_angles: bool = False,
                       nufft_tolerance: float = 1e-6,
                       oversampling: float = 2.0,
                       on_record=None):
    """Run the coarse-to-fine loop and return (finest reconstruction, level records).

    Level 0 starts from FBP of the coarsest data when ``use_fbp_init`` is set
    and from zeros otherwise; each later level starts from the interpolated
    previous solution.  ``on_record`` receives ``(level_index, record)``.
    """
    target = hierarchy.levels[-1]
    if full_sino.detector_bins < target:
        raise ValueError("detector does not cover the target grid")
    n_levels = len(hierarchy.levels)
    all_records = []
    estimate = None
    for lvl, side in enumerate(hierarchy.levels):
        factor = 1 << (n_levels - 1 - lvl)
        sino_l = downsample_sinogram(full_sino, factor, downsample_angles)
        geom = ScanGeometry(angles=sino_l.angles, detector_bins=sino_l.detector_bins,
                            image_side=side)
        sampling = polar_sampling(geom)
        recon_plan = NufftPlan(side, sampling, nufft_tolerance, oversampling)
        psf = build_psf(sampling, side, nufft_tolerance, oversampling)
        ctx = fidelity_context(recon_plan, psf, sino_l)
        if estimate is None:
            if use_fbp_init:
                f0 = fbp(recon_plan, sino_l)
            elif sino_l.slices > 1:
                f0 = Volume(np.zeros((sino_l.slices, side, side)))
            else:
                f0 = ImageGrid(np.zeros((side, side)))
        else:
            if isinstance(estimate, Volume):
                f0 = upsample(estimate, side, target_slices=sino_l.slices)
            else:
                f0 = upsample(estimate, side)
        cfg_l = replace(cfg, max_iters=hierarchy.iters_per_level[lvl], lipschitz=cfg.lipschitz)
        sink = (lambda rec, _l=lvl: on_record(_l, rec)) if on_record is not None else None
        estimate, records = solve(ctx, params, cfg_l, f0, on_record=sink)
        all_records.append(records)
    return estimate, all_records
