"""Fast normal-operator application and data-fidelity loss/gradient.

The composition backproject(project(f)) acts on an N x N image as a discrete
convolution with a point-spread kernel evaluated at integer pixel lags, so it
can be applied with padded FFTs: two transforms and an element-wise multiply,
instead of a forward and an adjoint projection per evaluation.

The kernel is synthesized once per scan geometry by running the adjoint NUFFT
over unit weights on every polar sample, on a padded grid of odd size
>= 2N-1 (odd keeps the kernel lags on the integer lattice under the package's
half-pixel-centered convention).

For even detector sizes each angle carries one unpaired Nyquist frequency.
Taking real parts inside the projection chain makes the composite operator act
on that frequency as z -> (z - conj(z))/2, which a plain convolution cannot
represent; the exact fix is a second, tiny kernel applied to the flipped
image.  It is folded into the same FFT pair, so the evaluation cost is
unchanged, and it vanishes identically for odd detector sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ImageGrid, Sinogram, Volume
from .nufft import NufftPlan, type1
from .radon import _back_project_rows, _sampling_matches

__all__ = [
    "PsfKernel",
    "FidelityContext",
    "padded_side_for",
    "compute_psf",
    "build_psf",
    "fidelity_context",
    "toeplitz_apply",
    "fidelity_loss",
    "fidelity_grad",
]

_BATCH_BYTES = 64 * 2**20


def _is_7smooth(v: int) -> bool:
    for f in (2, 3, 5, 7):
        while v % f == 0:
            v //= f
    return v == 1


def padded_side_for(source_side: int) -> int:
    """Smallest odd 7-smooth integer >= 2*source_side - 1 (FFT-friendly padding)."""
    v = 2 * source_side - 1
    if v % 2 == 0:
        v += 1
    while not _is_7smooth(v):
        v += 2
    return v


@dataclass(frozen=True)
class PsfKernel:
    """Fourier-domain convolution kernel of the projection normal operator.

    ``spectrum`` is the 2D FFT of the real, centro-symmetric lag kernel
    (adjoint NUFFT of all-ones sample weights) with the lag origin at index
    (0, 0).  The private spectra pre-combine the Nyquist correction and the
    1/Nd chain normalization for the apply path.
    """

    padded_side: int
    source_side: int
    radial_count: int
    spectrum: np.ndarray = field(repr=False)
    _main_spec: np.ndarray = field(repr=False)
    _flip_spec: np.ndarray | None = field(repr=False)

    @property
    def embed_offset(self) -> int:
        return (self.padded_side - self.source_side) // 2


def compute_psf(plan_pad: NufftPlan, source_side: int) -> PsfKernel:
    """Build the PSF kernel from a plan on the padded grid.

    ``plan_pad`` must share the reconstruction plan's polar sampling and have
    an odd grid side >= 2*source_side - 1.
    """
    m = plan_pad.grid_side
    if m < 2 * source_side - 1:
        raise ValueError(
            f"padded side {m} is smaller than 2N-1 = {2 * source_side - 1}"
        )
    if m % 2 == 0:
        raise ValueError("padded grid side must be odd so kernel lags are integers")
    sampling = plan_pad.sampling
    nd = sampling.radial_count
    nyq = sampling.nyquist_mask

    kernel = type1(plan_pad, np.ones(sampling.count, dtype=np.complex128)).real
    spectrum = np.fft.fft2(np.fft.ifftshift(kernel))

    s = (m - source_side) // 2
    if nyq.any():
        nyq_kernel = type1(plan_pad, np.where(nyq, 0.5, 0.0).astype(np.complex128)).real
        nyq_spec = np.fft.fft2(np.fft.ifftshift(nyq_kernel))
        main_spec = (spectrum - nyq_spec) / nd
        ph = np.exp(-2j * np.pi * np.arange(m) * (2 * s + source_side - 1) / m)
        flip_spec = -np.outer(ph, ph) * nyq_spec / nd
    else:
        main_spec = spectrum / nd
        flip_spec = None
    for arr in (spectrum, main_spec) + (() if flip_spec is None else (flip_spec,)):
        arr.setflags(write=False)
    return PsfKernel(
        padded_side=m,
        source_side=source_side,
        radial_count=nd,
        spectrum=spectrum,
        _main_spec=main_spec,
        _flip_spec=flip_spec,
    )


def build_psf(sampling, source_side: int, tolerance: float = 1e-6,
              oversampling: float = 2.0) -> PsfKernel:
    """Convenience: plan the padded grid for ``sampling`` and compute the kernel."""
    pad_plan = NufftPlan(padded_side_for(source_side), sampling, tolerance, oversampling)
    return compute_psf(pad_plan, source_side)


def _apply_batch(psf: PsfKernel, batch: np.ndarray) -> np.ndarray:
    """Normal operator on a (Z, N, N) stack via padded FFT convolution."""
    n, m, s = psf.source_side, psf.padded_side, psf.embed_offset
    z = batch.shape[0]
    out = np.empty_like(batch)
    chunk = max(1, _BATCH_BYTES // (16 * m * m))
    for lo in range(0, z, chunk):
        hi = min(lo + chunk, z)
        padded = np.zeros((hi - lo, m, m), dtype=np.complex128)
        padded[:, s:s + n, s:s + n] = batch[lo:hi]
        F = np.fft.fft2(padded, axes=(1, 2))
        acc = F * psf._main_spec[None]
        if psf._flip_spec is not None:
            acc += np.conj(F) * psf._flip_spec[None]
        out[lo:hi] = np.fft.ifft2(acc, axes=(1, 2)).real[:, s:s + n, s:s + n]
    return out


def toeplitz_apply(psf: PsfKernel, f):
    """Apply backproject(project(.)) to an image, volume, or bare array."""
    if isinstance(f, ImageGrid):
        _check_side(psf, f.side)
        return ImageGrid(_apply_batch(psf, f.data[None])[0])
    if isinstance(f, Volume):
        _check_side(psf, f.side)
        return Volume(_apply_batch(psf, f.data))
    arr = np.asarray(f, dtype=np.float64)
    if arr.ndim == 2:
        _check_side(psf, arr.shape[0])
        return _apply_batch(psf, arr[None])[0]
    _check_side(psf, arr.shape[1])
    return _apply_batch(psf, arr)


def _check_side(psf: PsfKernel, side: int) -> None:
    if side != psf.source_side:
        raise ValueError(f"image side {side} does not match kernel source side {psf.source_side}")


@dataclass(frozen=True)
class FidelityContext:
    """Per-(geometry, data) precomputation reused across all iterations:
    PSF spectrum, adjoint of the data, and the data norm."""

    psf: PsfKernel
    rstar_g: object  # ImageGrid or Volume matching the reconstruction kind
    g_norm_sq: float

    def __post_init__(self):
        if self.rstar_g.side != self.psf.source_side:
            raise ValueError("adjoint image side does not match PSF source side")

    @property
    def slices(self) -> int:
        return self.rstar_g.slices if isinstance(self.rstar_g, Volume) else 1

    @property
    def side(self) -> int:
        return self.rstar_g.side

    def rstar_array(self) -> np.ndarray:
        if isinstance(self.rstar_g, Volume):
            return self.rstar_g.data
        return self.rstar_g.data[None]


def fidelity_context(recon_plan: NufftPlan, psf: PsfKernel, sino: Sinogram) -> FidelityContext:
    """Precompute the adjoint of the measured data and its norm."""
    _sampling_matches(recon_plan, sino.angles, sino.detector_bins)
    if recon_plan.grid_side != psf.source_side:
        raise ValueError("reconstruction plan side does not match PSF source side")
    stacks = np.stack([_back_project_rows(recon_plan, sl) for sl in sino.data])
    rstar = ImageGrid(stacks[0]) if stacks.shape[0] == 1 else Volume(stacks)
    return FidelityContext(psf=psf, rstar_g=rstar, g_norm_sq=float(np.sum(sino.data**2)))


def _fidelity_arrays(ctx: FidelityContext, f) -> np.ndarray:
    if isinstance(f, ImageGrid):
        arr = f.data[None]
    elif isinstance(f, Volume):
        arr = f.data
    else:
        arr = np.asarray(f, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
    if arr.shape != (ctx.slices, ctx.side, ctx.side):
        raise ValueError(
            f"estimate shape {arr.shape} does not match data ({ctx.slices}, {ctx.side}, {ctx.side})"
        )
    return arr


def fidelity_loss(ctx: FidelityContext, f) -> float:
    """0.5 <f, Kf> - <f, R*g> + 0.5 g'g  ==  0.5 || R f - g ||^2 up to NUFFT error."""
    arr = _fidelity_arrays(ctx, f)
    kf = _apply_batch(ctx.psf, arr)
    return float(0.5 * np.sum(arr * kf) - np.sum(arr * ctx.rstar_array()) + 0.5 * ctx.g_norm_sq)


def fidelity_grad(ctx: FidelityContext, f):
    """K f - R*g  ==  R*(R f - g) up to NUFFT error; same kind as the input."""
    arr = _fidelity_arrays(ctx, f)
    grad = _apply_batch(ctx.psf, arr) - ctx.rstar_array()
    if isinstance(f, ImageGrid):
        return ImageGrid(grad[0])
    if isinstance(f, Volume):
        return Volume(grad)
    return grad[0] if np.asarray(f).ndim == 2 else grad
