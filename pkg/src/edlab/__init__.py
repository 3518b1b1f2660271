"""edlab: a numerical laboratory for entropic dynamics.

Maximum-entropy transition kernels, the coupled probability/phase flow and
its equivalent linear Schrodinger evolution, alpha'-controlled sub-quantum
Brownian ensembles with their deterministic (Bohmian) limit, the xi = 0
hybrid theory, and diagnostics for quantized circulation, equivariance and
fluctuation-scaling laws.
"""

__version__ = "0.1.0"

from .errors import (
    CausticDetected,
    DegenerateFit,
    EdlabError,
    LoopThroughNode,
    MissingArtifact,
    NaNVelocity,
    NonIntegerQuantization,
    NonPositive,
    NotNormalized,
    ParseError,
    UnsupportedScenario,
    ValidationError,
    XiZero,
)
from .grid import Grid, interpolate_periodic, spectral_gradient
from .model import (
    INFINITE_ALPHA,
    HydroState,
    MassTensor,
    ModelParameters,
    TrajectoryEnsemble,
    ValidatedParameters,
    VelocityFields,
    WaveFunction,
    compute_velocity_fields,
    hydro_to_wavefunction,
    validate_parameters,
    velocity_fields_from_hydro,
    wavefunction_to_hydro,
)
from .propagator import (
    PotentialField,
    PropagationReport,
    check_xi_equivalence,
    ensemble_hamiltonian,
    propagate_hybrid,
    propagate_linear,
)
from .sampler import (
    KernelSpec,
    evolve_ensemble,
    initial_ensemble,
    integrate_bohmian,
    kernel_from_unrescaled,
    sample_initial_positions,
    sample_step,
    transition_kernel,
    trajectory_stream,
)

__all__ = [name for name in dir() if not name.startswith("_")]
