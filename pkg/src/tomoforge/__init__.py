"""tomoforge: model-based iterative reconstruction for parallel-beam tomography.

Fourier-domain projection operators (NUFFT), convolution-kernel gradients,
FBP initialization, coarse-to-fine optimization, and a slab-parallel runtime
with halo exchange.
"""

__version__ = "0.1.0"

from .geometry import (
    ImageGrid,
    PolarSampling,
    ScanGeometry,
    Sinogram,
    Volume,
    disk_phantom,
    polar_sampling,
    shepp_logan,
)
from .nufft import NufftPlan, SpreadKernel, direct_dft, plan, type1, type2
from .radon import RampFilter, back_project, fbp, forward_project, project_volume, ramp_filter_apply
from .toeplitz import (
    FidelityContext,
    PsfKernel,
    build_psf,
    compute_psf,
    fidelity_context,
    fidelity_grad,
    fidelity_loss,
    padded_side_for,
    toeplitz_apply,
)
from .qggmrf import (
    NeighborStencil,
    QggmrfParams,
    potential,
    potential_deriv,
    prior_energy,
    prior_grad,
    stencil_2d,
    stencil_3d,
)
from .solver import IterationRecord, SolverConfig, estimate_lipschitz, objective, solve
from .multires import (
    GridHierarchy,
    default_hierarchy,
    downsample_sinogram,
    lanczos_kernel,
    solve_hierarchical,
    upsample,
)
from .runtime import (
    HaloMessage,
    InProcessTransport,
    PipelineTask,
    SlabPartition,
    SocketTransport,
    distributed_solve,
    exchange_halos,
    partition,
    run_pipeline,
)
from .fileio import ReconPlan, export_slice, load_array, load_plan, save_array
