"""Discrete potential theory on level-graded electrical networks."""

from .diagram import (
    Diagram,
    ExtensionRule,
    GeneralGraph,
    VertexId,
    Violation,
    check_bratteli_structure,
    diagram_from_graph,
    extend_to,
    extract_maximal_bratteli,
    gen_binary_tree,
    gen_binary_tree_radial,
    gen_bottleneck,
    gen_ladder,
    gen_pascal,
    gen_stationary,
    make_diagram,
    validate,
)
from .energy import (
    CurrentBalanceReport,
    DissipationReport,
    EnergyReport,
    current_balance,
    dissipation_check,
    energy_harmonic_formulas,
    energy_lower_bound,
    energy_norm,
    resistance_distance,
    stationary_energy_criterion,
)
from .harmonic import (
    DimensionResult,
    HarmonicState,
    SolveReport,
    extend_harmonic,
    harm_dimension,
    harmonicity_check,
    solve_chain,
    solve_dipole,
    solve_monopole,
)
from .operators import (
    LevelFunction,
    LevelOperators,
    SpectralBoundReport,
    build_level_operators,
    laplacian_apply,
    markov_apply,
    spectral_bound_check,
)
from .pathspace import (
    DipoleMatrixResult,
    DirichletSystem,
    GreenSolve,
    PoissonResult,
    StabilizationReport,
    TransienceReport,
    WalkConfig,
    WalkEstimates,
    dipole_green,
    dipole_matrix_M,
    dirichlet_solve,
    green_exact,
    green_identity_report,
    hitting_function,
    monopole_green,
    multipole,
    poisson_kernel,
    poisson_stabilization,
    simulate_walks,
    transience_report,
)

__version__ = "0.1.0"
