"""Blind deconvolution of coded-mask measurements by convex lifting."""

from .identifiability import (
    IdentifiabilityResult,
    InconsistentDataError,
    NonDegeneracyWarning,
    ObservationGraph,
    ObservationPattern,
    build_graph,
    build_graph_from_measurements,
    check_identifiable,
    check_subspace_condition,
    observation_pattern,
    reconstruct_from_full_observation,
)
from .measurement import (
    LiftedOperator,
    MeasurementSet,
    WhitenedMeasurements,
    forward_measure,
    lifted_adjoint,
    lifted_apply,
    lifted_truth,
    make_operator,
    measure,
    restrict_operator,
    whiten,
)
from .model import (
    BlurKernel,
    Image,
    MaskSet,
    SingularWhiteningError,
    SubsamplingScheme,
    build_subsampling,
    coherence,
    gen_bandpass_kernel,
    gen_coherent_kernel,
    gen_image,
    gen_rademacher_masks,
    make_transform,
)
from .recovery import (
    LiftedSolution,
    SolverConfig,
    TangentSpace,
    align_factors,
    certificate_diagnostics,
    extract_factors,
    lifted_relative_error,
    nucmin_solve,
    project_T,
    project_Tperp,
    spectral_recover,
)
from .spectral_core import PartialDFT, RankOne, best_rank_one, circular_convolve, partial_dft

__version__ = "0.1.0"
