"""Numerical criticality theory for (p,A)-Laplacian energies with potential."""

from .criticality import (
    CriticalityReport,
    capacity,
    classify,
    ground_state,
    hsm_ratio,
    perturbation_threshold,
    poincare_constant,
    zero_threshold,
)
from .energy import (
    adsa_I,
    anisotropic_norm,
    elementary_equiv,
    functional_Q,
    linearized_bounds,
    picone,
    simplified_energy,
)
from .field import (
    CoefficientField,
    DomainBox,
    Exhaustion,
    Grid,
    exhaustion_from_extents,
    gradient,
    integrate,
    interval,
    make_exhaustion,
    parse_field_expr,
    square,
)
from .minimal import (
    GreenReport,
    LiouvilleInput,
    green_function,
    liouville_check,
    minimal_growth_solution,
    singularity_exponent,
)
from .solve import (
    InconclusiveError,
    ProblemFamily,
    ProblemSpec,
    SolveError,
    SupercriticalError,
    positive_solution_aap,
    principal_eigenpair,
    solve_dirichlet,
)

__version__ = "0.1.0"
