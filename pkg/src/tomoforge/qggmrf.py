"""Edge-preserving pairwise-difference prior over 8/26-neighbor cliques.

The potential is the standard q-generalized Gaussian MRF form

    rho(d) = (|d|^p / (p sigma^p)) * r^(q-p) / (1 + r^(q-p)),   r = |d| / (T sigma)

which is quadratic near the origin (for p=2) and grows like |d|^q for large
differences.  Both the potential and its derivative are evaluated through the
complementary ratio v = r^(p-q) so they stay finite for arbitrarily small
differences.

The per-voxel gradient sums rho' over the *full* stencil, which equals the
gradient of the clique energy in which each unordered pair is counted once.
Cliques reaching past the volume boundary are omitted (no penalty against
implicit zeros; for face neighbors this is identical to mirroring the edge
sample, and unlike a mirrored ghost it keeps diagonal cliques at corners
consistent with the pair energy, so the gradient is exact).  At slab
boundaries an explicit halo plane extends the volume, making partitioned
evaluation an exact refactoring of the unpartitioned one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ImageGrid, Volume

__all__ = [
    "QggmrfParams",
    "NeighborStencil",
    "stencil_2d",
    "stencil_3d",
    "stencil_for",
    "potential",
    "potential_deriv",
    "prior_grad",
    "prior_energy",
]


@dataclass(frozen=True)
class QggmrfParams:
    """Prior shape (p, q, T), scale sigma, and regularization weight lam."""

    sigma: float
    lam: float = 0.0
    p: float = 2.0
    q: float = 1.2
    T: float = 1.0

    def __post_init__(self):
        if not (1.0 <= self.q < self.p <= 2.0):
            raise ValueError(f"require 1 <= q < p <= 2, got p={self.p}, q={self.q}")
        if self.T <= 0:
            raise ValueError("transition threshold T must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.lam < 0:
            raise ValueError("regularization weight must be nonnegative")


@dataclass(frozen=True)
class NeighborStencil:
    """Clique offsets and inverse-distance weights normalized to sum 1."""

    offsets: tuple
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if len(self.offsets) not in (8, 26):
            raise ValueError("stencil must have 8 (2D) or 26 (3D) offsets")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")

    def half(self):
        """Offsets with lexicographically positive displacement: each unordered
        pair appears exactly once."""
        pairs = [(o, w) for o, w in zip(self.offsets, self.weights) if o > (0, 0, 0)]
        return pairs


def _build_stencil(three_d: bool) -> NeighborStencil:
    rng = (-1, 0, 1)
    offsets = [
        (dz, dy, dx)
        for dz in (rng if three_d else (0,))
        for dy in rng
        for dx in rng
        if (dz, dy, dx) != (0, 0, 0)
    ]
    dist = np.array([np.sqrt(dz * dz + dy * dy + dx * dx) for dz, dy, dx in offsets])
    w = (1.0 / dist) / np.sum(1.0 / dist)
    return NeighborStencil(offsets=tuple(offsets), weights=w)


_STENCIL_2D = _build_stencil(False)
_STENCIL_3D = _build_stencil(True)


def stencil_2d() -> NeighborStencil:
    return _STENCIL_2D


def stencil_3d() -> NeighborStencil:
    return _STENCIL_3D


def stencil_for(arr: np.ndarray) -> NeighborStencil:
    """8-neighbor stencil for single-slice problems, 26-neighbor otherwise."""
    return _STENCIL_3D if arr.shape[0] > 1 else _STENCIL_2D


def potential(params: QggmrfParams, delta):
    """rho(delta); even, nonnegative, rho(0) = 0."""
    d = np.abs(np.asarray(delta, dtype=np.float64))
    v = (d / (params.T * params.sigma)) ** (params.p - params.q)
    return d**params.p / (params.p * params.sigma**params.p) / (1.0 + v)


def potential_deriv(params: QggmrfParams, delta):
    """d rho / d delta; odd, sign-matching, bounded slope max 1/sigma^p at p=2."""
    d = np.asarray(delta, dtype=np.float64)
    a = np.abs(d)
    v = (a / (params.T * params.sigma)) ** (params.p - params.q)
    shape = (1.0 + (params.q / params.p) * v) / (1.0 + v) ** 2
    return np.sign(d) * a ** (params.p - 1.0) / params.sigma**params.p * shape


def _volume_array(vol) -> np.ndarray:
    if isinstance(vol, Volume):
        return vol.data
    if isinstance(vol, ImageGrid):
        return vol.data[None]
    arr = np.asarray(vol, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def _padded(arr: np.ndarray, halo_lo, halo_hi):
    """One-voxel ghost layer plus a validity mask.

    Halo planes along the slice axis are real data; every other ghost voxel is
    marked invalid so its cliques drop out of the gradient (edge values are
    used as placeholder so differences stay finite)."""
    z, h, w = arr.shape
    out = np.empty((z + 2, h + 2, w + 2), dtype=arr.dtype)
    valid = np.zeros((z + 2, h + 2, w + 2))
    out[1:-1, 1:-1, 1:-1] = arr
    valid[1:-1, 1:-1, 1:-1] = 1.0
    out[0, 1:-1, 1:-1] = arr[0] if halo_lo is None else halo_lo
    out[-1, 1:-1, 1:-1] = arr[-1] if halo_hi is None else halo_hi
    valid[0, 1:-1, 1:-1] = 0.0 if halo_lo is None else 1.0
    valid[-1, 1:-1, 1:-1] = 0.0 if halo_hi is None else 1.0
    for face in ((slice(None), 0), (slice(None), -1)):
        out[face[0], face[1], :] = out[face[0], 1 if face[1] == 0 else -2, :]
        out[face[0], :, face[1]] = out[face[0], :, 1 if face[1] == 0 else -2]
    return out, valid


def _check_halo(plane, shape) -> np.ndarray | None:
    if plane is None:
        return None
    p = np.asarray(plane, dtype=np.float64)
    if p.shape != shape:
        raise ValueError(f"halo plane shape {p.shape} does not match slice shape {shape}")
    return p


def prior_grad(params: QggmrfParams, stencil: NeighborStencil, vol,
               halo_lo=None, halo_hi=None):
    """Per-voxel gradient sum_s b_s rho'(f_v - f_{v+s}); same kind as the input."""
    arr = _volume_array(vol)
    z, h, w = arr.shape
    halo_lo = _check_halo(halo_lo, (h, w))
    halo_hi = _check_halo(halo_hi, (h, w))
    pad, valid = _padded(arr, halo_lo, halo_hi)
    grad = np.zeros_like(arr)
    for (dz, dy, dx), b in zip(stencil.offsets, stencil.weights):
        block = (slice(1 + dz, 1 + dz + z), slice(1 + dy, 1 + dy + h),
                 slice(1 + dx, 1 + dx + w))
        grad += b * potential_deriv(params, arr - pad[block]) * valid[block]
    if isinstance(vol, Volume):
        return Volume(grad)
    if isinstance(vol, ImageGrid):
        return ImageGrid(grad[0])
    return grad[0] if np.asarray(vol).ndim == 2 else grad


def prior_energy(params: QggmrfParams, stencil: NeighborStencil, vol,
                 halo_hi=None) -> float:
    """Clique energy sum over unordered pairs, each counted once.

    Pairs crossing the upper slab boundary are included when ``halo_hi`` is
    given (they belong to the lower slab), so per-slab energies sum exactly to
    the unpartitioned energy.
    """
    arr = _volume_array(vol)
    z, h, w = arr.shape
    halo_hi = _check_halo(halo_hi, (h, w))
    total = 0.0
    for (dz, dy, dx), b in stencil.half():
        # in-range pairs via slicing (ghosts would contribute rho(0) = 0)
        zs = slice(0, z - dz)
        zn = slice(dz, z)
        ys = slice(max(0, -dy), h - max(0, dy))
        yn = slice(max(0, dy), h + min(0, dy))
        xs = slice(max(0, -dx), w - max(0, dx))
        xn = slice(max(0, dx), w + min(0, dx))
        diff = arr[zs, ys, xs] - arr[zn, yn, xn]
        total += b * float(np.sum(potential(params, diff)))
        if dz == 1 and halo_hi is not None and z >= 1:
            diff = arr[z - 1, ys, xs] - halo_hi[yn, xn]
            total += b * float(np.sum(potential(params, diff)))
    return total
