"""Verification lab and simulator for the intertwining of the reflected
Wright-Fisher diffusion on [0, 1] with the explosive pure birth chain of rates
``(2y+1)(2y+2)``.

Submodules: ``poly`` (generators and semigroups on invariant subspaces),
``kernels`` (K, Lambda, Psi, Phi), ``intertwine`` (coupled generator and
verifiers), ``sim`` (Monte Carlo engines), ``analytics`` (explosion and
absorption laws, goodness of fit) and ``cli``.
"""

from .analytics import (
    CancellationError,
    HypoexpSpec,
    absorption_cdf_from,
    absorption_mean_from,
    explosion_mean,
    explosion_variance,
    hypoexp_cdf,
    ks_statistic,
    scale_speed,
)
from .intertwine import (
    build_coupled_generator,
    positive_maximum_check,
    verify_GK_KH,
    verify_Lambda_intertwining,
    verify_Psi_intertwining,
    verify_Pt_approximation,
    verify_PtK_KQt,
)
from .kernels import (
    CoupledFunction,
    kernel_K_apply,
    kernel_K_eval,
    lambda_apply,
    phi_lift,
    psi_lift,
    sample_K,
)
from .poly import (
    INF,
    EvenPolynomial,
    GeneratorMatrix,
    LatticeFunction,
    NumericFailure,
    apply_semigroup_P,
    apply_semigroup_Q,
    birth_rate,
    build_G_matrix,
    build_H_matrix,
    matrix_exp,
)
from .sim import (
    SimConfig,
    TrajectoryRecord,
    check_averaging,
    simulate_birth,
    simulate_coupled,
    simulate_wf,
)

__version__ = "0.1.0"
