"""Annihilating-branching random walks on lattice domains and their heat limit."""

from __future__ import annotations

from .analysis import (
    ComparisonReport,
    InsufficientDataError,
    ObservableSeries,
    SegregationReport,
    block_index,
    block_l1,
    compare_to_limit,
    drift_residual,
    fourier_coeff,
    integrated_V,
    noise_scaling,
    overlap_identity_defect,
    overlap_lambda,
    qv_scaling,
    realized_qv,
    segregation_deficit,
    segregation_report,
)
from .dynamics import (
    Configuration,
    ConservationError,
    EventBudgetError,
    EventRecord,
    SimParams,
    annihilation_intensity,
    apply_event,
    compute_V,
    density_field,
    generator_apply,
    init_from_density,
    make_rng,
    simulate,
    step,
    total_jump_rate,
)
from .lattice import (
    DomainSpec,
    Lattice,
    LatticeError,
    LinearOperator,
    adjoint_laplacian,
    build_lattice,
    compute_holding_time,
    discrete_laplacian,
    nearest_boundary_normal,
    read_lattice,
    solve_boundary_jumps,
    write_lattice,
)
from .spectral import (
    HeatEvolver,
    SpectralBasis,
    closed_form_basis,
    eig_neumann,
    evolve_heat,
    normalize_tv,
    normalizer_C,
    total_variation,
)

__version__ = "0.1.0"
