"""Grids, sinograms, scan geometry and the polar frequency sampling pattern.

Centering conventions used throughout the package (chosen once, here):

* object pixel ``(ix, iy)`` sits at ``x = ix - (N-1)/2``, ``y = iy - (N-1)/2``
  (units of pixels, origin at the grid center),
* detector bin ``j`` sits at offset ``t = j - (Nd-1)/2``,
* radial frequencies are ``w_j = 2*pi*j/Nd`` for ``j`` in the signed half
  range ``{-floor(Nd/2), ..., ceil(Nd/2)-1}`` (radians per pixel).

Every operator in the package assumes these conventions; the NUFFT delta-image
test pins them down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ImageGrid",
    "Volume",
    "Sinogram",
    "PolarSampling",
    "ScanGeometry",
    "polar_sampling",
    "radial_frequencies",
    "shepp_logan",
    "disk_phantom",
]


def _as_readonly(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ImageGrid:
    """Square 2D reconstruction grid. ``data`` has shape (side, side), row-major."""

    data: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "data", _as_readonly(self.data))
        if self.data.ndim != 2:
            raise ValueError(f"image data must be 2D, got shape {self.data.shape}")
        h, w = self.data.shape
        if h != w:
            raise ValueError(f"reconstruction grid must be square, got {h}x{w}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")

    @property
    def side(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class Volume:
    """Stack of square slices along the rotation axis. ``data`` shape (slices, side, side)."""

    data: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "data", _as_readonly(self.data))
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        z, h, w = self.data.shape
        if z < 1:
            raise ValueError("volume needs at least one slice")
        if h != w:
            raise ValueError(f"volume slices must be square, got {h}x{w}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def slices(self) -> int:
        return self.data.shape[0]

    @property
    def side(self) -> int:
        return self.data.shape[1]

    def slice_grid(self, z: int) -> ImageGrid:
        return ImageGrid(self.data[z], pixel_size=self.pixel_size)


@dataclass(frozen=True)
class Sinogram:
    """Projection data ordered (slice, angle, detector bin)."""

    angles: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "angles", _as_readonly(self.angles))
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None, :, :]
        object.__setattr__(self, "data", _as_readonly(data))
        _check_angles(self.angles)
        if self.data.ndim != 3:
            raise ValueError(f"sinogram data must be (slices, angles, bins), got {self.data.shape}")
        if self.data.shape[1] != self.angles.size:
            raise ValueError(
                f"sinogram has {self.data.shape[1]} angle rows but {self.angles.size} angles"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram contains non-finite values")

    @property
    def slices(self) -> int:
        return self.data.shape[0]

    @property
    def detector_bins(self) -> int:
        return self.data.shape[2]


def _check_angles(angles: np.ndarray):
    if angles.size == 0:
        raise ValueError("angle list must not be empty")
    if np.any(angles < 0.0) or np.any(angles >= np.pi):
        raise ValueError("projection angles must lie in [0, pi); fold inputs before calling")
    if angles.size > 1 and np.any(np.diff(angles) <= 0):
        raise ValueError("projection angles must be strictly increasing")


@dataclass(frozen=True)
class ScanGeometry:
    """Parallel-beam acquisition: projection angles, detector size, target grid side."""

    angles: np.ndarray
    detector_bins: int
    image_side: int

    def __post_init__(self):
        object.__setattr__(self, "angles", _as_readonly(self.angles))
        _check_angles(self.angles)
        if self.detector_bins < 1:
            raise ValueError("detector_bins must be positive")
        if self.detector_bins < self.image_side:
            raise ValueError(
                f"detector ({self.detector_bins} bins) must cover the object "
                f"({self.image_side} px)"
            )


@dataclass(frozen=True)
class PolarSampling:
    """Polar frequency sample set, ordered angle-major with radial index ascending."""

    angles: np.ndarray
    radial_count: int
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "angles", _as_readonly(self.angles))
        object.__setattr__(self, "samples", _as_readonly(self.samples))
        if self.samples.shape != (self.angles.size * self.radial_count, 2):
            raise ValueError("samples must have shape (n_angles * radial_count, 2)")

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    @property
    def radial_freqs(self) -> np.ndarray:
        return radial_frequencies(self.radial_count)

    @property
    def nyquist_mask(self) -> np.ndarray:
        """True at the unpaired Nyquist sample of each angle (even radial_count only)."""
        nd = self.radial_count
        j = np.arange(-(nd // 2), (nd + 1) // 2)
        if nd % 2 == 0:
            return np.tile(j == -(nd // 2), self.angles.size)
        return np.zeros(self.count, dtype=bool)


def radial_frequencies(detector_bins: int) -> np.ndarray:
    """Signed radial frequencies 2*pi*j/Nd, j in {-floor(Nd/2), ..., ceil(Nd/2)-1}."""
    if detector_bins < 1:
        raise ValueError("detector_bins must be positive")
    j = np.arange(-(detector_bins // 2), (detector_bins + 1) // 2)
    return 2.0 * np.pi * j / detector_bins


def polar_sampling(geom: ScanGeometry) -> PolarSampling:
    """Full polar frequency set (w_j cos(theta), w_j sin(theta)) for the scan geometry."""
    omega = radial_frequencies(geom.detector_bins)
    kx = np.outer(np.cos(geom.angles), omega).ravel()
    ky = np.outer(np.sin(geom.angles), omega).ravel()
    return PolarSampling(
        angles=geom.angles,
        radial_count=geom.detector_bins,
        samples=np.column_stack([kx, ky]),
    )


# Modified Shepp-Logan ellipse set: (intensity, a, b, x0, y0, angle_deg).
# High-contrast variant with skull at 1.0 and soft tissue near 0.2.
_SHEPP_LOGAN = np.array(
    [
        [1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0],
        [-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0],
        [-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0],
        [-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0],
        [0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0],
        [0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0],
        [0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0],
        [0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0],
        [0.10, 0.0230, 0.0230, 0.00, -0.6060, 0.0],
        [0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0],
    ]
)

# z extent of the ellipsoid envelope used by the extruded 3D variant
_Z_ENVELOPE = 0.95


def _rasterize_ellipses(side: int, axis_scale: float = 1.0) -> np.ndarray:
    # pixel centers scaled so 2x grids nest exactly under 2x2 box averaging
    coords = (2.0 * np.arange(side) - side + 1.0) / side
    X, Y = np.meshgrid(coords, coords, indexing="ij")
    img = np.zeros((side, side))
    if axis_scale <= 0.0:
        return img
    for amp, a, b, x0, y0, phi_deg in _SHEPP_LOGAN:
        phi = np.deg2rad(phi_deg)
        a_s, b_s = a * axis_scale, b * axis_scale
        xr = (X - x0 * axis_scale) * np.cos(phi) + (Y - y0 * axis_scale) * np.sin(phi)
        yr = (Y - y0 * axis_scale) * np.cos(phi) - (X - x0 * axis_scale) * np.sin(phi)
        img[(xr / a_s) ** 2 + (yr / b_s) ** 2 <= 1.0] += amp
    # signed intensities cancel to 0 only up to roundoff
    return np.maximum(img, 0.0)


def shepp_logan(side: int, three_d: bool = False, slices: int = 1):
    """Modified Shepp-Logan head phantom on a side x side grid, values in [0, 1].

    The 3D variant scales the ellipse set per slice by the cross-section of an
    ellipsoidal envelope with z half-extent 0.95, so end slices taper to empty.
    """
    if side < 8:
        raise ValueError("phantom side must be at least 8")
    if not three_d:
        return ImageGrid(_rasterize_ellipses(side))
    if slices < 1:
        raise ValueError("3D phantom needs at least one slice")
    data = np.zeros((slices, side, side))
    for iz in range(slices):
        z = (2.0 * iz - slices + 1.0) / slices if slices > 1 else 0.0
        scale = np.sqrt(max(0.0, 1.0 - (z / _Z_ENVELOPE) ** 2))
        data[iz] = _rasterize_ellipses(side, axis_scale=scale)
    return Volume(data)


def disk_phantom(side: int, radius: float, value: float = 1.0) -> ImageGrid:
    """Centered disk: `value` at pixel centers strictly inside `radius`, 0 outside."""
    if not 0.0 < radius <= side / 2.0:
        raise ValueError(f"radius must be in (0, side/2], got {radius}")
    c = (side - 1) / 2.0
    x = np.arange(side) - c
    X, Y = np.meshgrid(x, x, indexing="ij")
    return ImageGrid(np.where(X * X + Y * Y < radius * radius, float(value), 0.0))
