"""On-disk formats: raw float64 arrays with JSON sidecars, TOML reconstruction
plans, convergence CSV logs, and 8-bit slice exports.

Array files are bit-exact: a little-endian float64 payload at ``path`` plus a
``path + ".json"`` sidecar carrying kind, dims and metadata.  Sinograms embed
their projection angles in the sidecar.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10 hosts
    import tomli as tomllib

from .geometry import ImageGrid, Sinogram, Volume
from .qggmrf import QggmrfParams
from .solver import SolverConfig

__all__ = [
    "save_array",
    "load_array",
    "ReconPlan",
    "load_plan",
    "write_convergence_csv",
    "config_hash",
    "export_slice",
]

_DTYPE_TAG = "<f8"


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_array(path, obj) -> Path:
    """Write an ImageGrid / Volume / Sinogram as raw float64 + JSON sidecar."""
    path = Path(path)
    if isinstance(obj, ImageGrid):
        header = {"kind": "image", "dims": list(obj.data.shape),
                  "axis_order": "yx", "dtype": _DTYPE_TAG, "pixel_size": obj.pixel_size}
    elif isinstance(obj, Volume):
        header = {"kind": "volume", "dims": list(obj.data.shape),
                  "axis_order": "zyx", "dtype": _DTYPE_TAG, "pixel_size": obj.pixel_size}
    elif isinstance(obj, Sinogram):
        header = {"kind": "sinogram", "dims": list(obj.data.shape),
                  "axis_order": "slice-angle-bin", "dtype": _DTYPE_TAG,
                  "angles": [float(a) for a in obj.angles]}
    else:
        raise TypeError(f"cannot save object of type {type(obj).__name__}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(obj.data, dtype=_DTYPE_TAG).tobytes())
    _sidecar(path).write_text(json.dumps(header, indent=1))
    return path


def load_array(path):
    """Load an array file; the sidecar's ``kind`` selects the returned type."""
    path = Path(path)
    header = json.loads(_sidecar(path).read_text())
    dims = header["dims"]
    if any(d <= 0 for d in dims):
        raise ValueError(f"non-positive dims in header: {dims}")
    if header.get("dtype") != _DTYPE_TAG:
        raise ValueError(f"unsupported dtype tag {header.get('dtype')!r}")
    payload = path.read_bytes()
    expected = 8 * int(np.prod(dims))
    if len(payload) != expected:
        raise ValueError(
            f"payload is {len(payload)} bytes but header dims {dims} imply {expected}"
        )
    data = np.frombuffer(payload, dtype=_DTYPE_TAG).reshape(dims)
    kind = header["kind"]
    if kind == "image":
        return ImageGrid(data, pixel_size=header.get("pixel_size", 1.0))
    if kind == "volume":
        return Volume(data, pixel_size=header.get("pixel_size", 1.0))
    if kind == "sinogram":
        return Sinogram(angles=np.asarray(header["angles"], dtype=np.float64), data=data)
    raise ValueError(f"unknown array kind {kind!r}")


@dataclass(frozen=True)
class ReconPlan:
    """Parsed reconstruction plan (TOML): geometry, prior, solver, hierarchy, runtime."""

    image_side: int
    qggmrf: QggmrfParams | None  # None while sigma is deferred to "auto"
    sigma_auto: bool
    lam: float
    p: float
    q: float
    T: float
    solver: SolverConfig
    levels: int | None
    iters_per_level: tuple | None
    downsample_angles: bool
    workers: int
    seed: int
    nufft_tolerance: float
    oversampling: float
    init_volume: Path | None

    def resolve_params(self, sigma: float) -> QggmrfParams:
        return QggmrfParams(sigma=sigma, lam=self.lam, p=self.p, q=self.q, T=self.T)


_PLAN_SCHEMA = {
    "geometry": {"image_side"},
    "qggmrf": {"sigma", "lambda", "p", "q", "T"},
    "solver": {"max_iters", "tol", "lipschitz", "restart", "nonneg", "log_every"},
    "hierarchy": {"levels", "iters_per_level", "downsample_angles"},
    "runtime": {"workers", "seed"},
    "nufft": {"tolerance", "oversampling"},
    "files": {"init_volume"},
}


def load_plan(path) -> ReconPlan:
    """Parse and validate a plan file; unknown keys are rejected and referenced
    files must exist."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    for section, keys in raw.items():
        if section not in _PLAN_SCHEMA:
            raise ValueError(f"unknown plan section [{section}]")
        if not isinstance(keys, dict):
            raise ValueError(f"plan section [{section}] must be a table")
        unknown = set(keys) - _PLAN_SCHEMA[section]
        if unknown:
            raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
    geometry = raw.get("geometry", {})
    if "image_side" not in geometry:
        raise ValueError("plan must set geometry.image_side")
    qg = raw.get("qggmrf", {})
    sigma = qg.get("sigma", "auto")
    sigma_auto = isinstance(sigma, str)
    if sigma_auto and sigma != "auto":
        raise ValueError(f"qggmrf.sigma must be a number or 'auto', got {sigma!r}")
    sv = raw.get("solver", {})
    lipschitz = sv.get("lipschitz", "auto")
    if isinstance(lipschitz, str):
        if lipschitz != "auto":
            raise ValueError("solver.lipschitz must be a number or 'auto'")
        lipschitz = None
    solver_cfg = SolverConfig(
        max_iters=int(sv.get("max_iters", 100)),
        tol=float(sv.get("tol", 1e-5)),
        lipschitz=lipschitz,
        restart=bool(sv.get("restart", True)),
        log_every=int(sv.get("log_every", 1)),
        nonneg=bool(sv.get("nonneg", False)),
    )
    hier = raw.get("hierarchy", {})
    iters = hier.get("iters_per_level")
    rt = raw.get("runtime", {})
    nf = raw.get("nufft", {})
    files = raw.get("files", {})
    init_volume = files.get("init_volume")
    if init_volume is not None:
        init_volume = (path.parent / init_volume).resolve()
        if not init_volume.exists():
            raise ValueError(f"referenced file does not exist: {init_volume}")
        if not _sidecar(init_volume).exists():
            raise ValueError(f"referenced file is missing its sidecar: {init_volume}")
    lam = float(qg.get("lambda", 0.0))
    p_exp = float(qg.get("p", 2.0))
    q_exp = float(qg.get("q", 1.2))
    t_thresh = float(qg.get("T", 1.0))
    params = None if sigma_auto else QggmrfParams(
        sigma=float(sigma), lam=lam, p=p_exp, q=q_exp, T=t_thresh)
    plan = ReconPlan(
        image_side=int(geometry["image_side"]),
        qggmrf=params,
        sigma_auto=sigma_auto,
        lam=lam,
        p=p_exp,
        q=q_exp,
        T=t_thresh,
        solver=solver_cfg,
        levels=int(hier["levels"]) if "levels" in hier else None,
        iters_per_level=tuple(int(v) for v in iters) if iters is not None else None,
        downsample_angles=bool(hier.get("downsample_angles", False)),
        workers=int(rt.get("workers", 1)),
        seed=int(rt.get("seed", 0)),
        nufft_tolerance=float(nf.get("tolerance", 1e-6)),
        oversampling=float(nf.get("oversampling", 2.0)),
        init_volume=init_volume,
    )
    return plan


CSV_COLUMNS = ("iter", "objective", "fidelity", "prior", "grad_norm",
               "time_s", "restarted", "level", "workers")


def config_hash(config: dict) -> str:
    """Short stable hash of a configuration mapping (reproducibility stamp)."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_convergence_csv(path, rows, metadata: dict) -> Path:
    """Write iteration rows with a leading ``# key=value`` metadata comment.

    ``rows`` holds (record, level, workers) triples.
    """
    from . import __version__

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": __version__, **metadata}
    meta.setdefault("config_hash", config_hash(metadata))
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec, level, workers in rows:
            writer.writerow([
                rec.iter, f"{rec.objective:.17g}", f"{rec.fidelity:.17g}",
                f"{rec.prior:.17g}", f"{rec.grad_norm:.17g}", f"{rec.step_time:.6f}",
                int(rec.restarted), level, workers,
            ])
    return path


def export_slice(path, obj, slice_index: int = 0) -> Path:
    """8-bit min-max windowed slice export; the window is recorded in the
    filename (``name_w<lo>_<hi>.png`` / ``.pgm``)."""
    path = Path(path)
    if isinstance(obj, Volume):
        if not 0 <= slice_index < obj.slices:
            raise ValueError(f"slice index {slice_index} out of range")
        arr = obj.data[slice_index]
    elif isinstance(obj, ImageGrid):
        arr = obj.data
    else:
        arr = np.asarray(obj, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    scale = (hi - lo) if hi > lo else 1.0
    img8 = np.clip((arr - lo) / scale * 255.0, 0, 255).astype(np.uint8)
    suffix = path.suffix.lower() or ".png"
    if suffix not in (".png", ".pgm"):
        raise ValueError(f"unsupported export format {suffix!r} (use .png or .pgm)")
    out = path.with_name(f"{path.stem}_w{lo:.6g}_{hi:.6g}{suffix}")
    out.parent.mkdir(parents=True, exist_ok=True)
    if suffix == ".pgm":
        with open(out, "wb") as fh:
            fh.write(f"P5\n{img8.shape[1]} {img8.shape[0]}\n255\n".encode())
            fh.write(img8.tobytes())
    else:
        from PIL import Image

        Image.fromarray(img8, mode="L").save(out)
    return out
