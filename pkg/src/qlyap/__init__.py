"""Quasi-stationary spectra, Q-processes and conditioned Lyapunov exponents
for absorbed random dynamical systems."""

__version__ = "0.1.0"

from .dynamics import (
    AbsorbedPath,
    AnalyticEta,
    CocycleSample,
    DiscreteSystem,
    Domain,
    SdeSystem,
    box_domain,
    check_jacobians,
    cocycle_from_propagators,
    doob_drift,
    integrate_sde,
    integrate_tangent,
    sample_discrete_path,
    tangent_propagators,
    unbounded_domain,
)
from .ensemble import run_ensemble, run_tangent_ensemble
from .errors import (
    ConfigError,
    EmptyCellError,
    EtaFloorError,
    EtaNonPositive,
    InsufficientSurvivors,
    IntegrityError,
    LeakageAbort,
    MissingSpectralData,
    NonUniqueQSD,
    NoSurvival,
    QlyapError,
    RankCollapseError,
)
from .lyapunov import (
    FtleDistribution,
    GrassmannPoint,
    LyapunovReport,
    OseledetsEstimate,
    ScaledFactorization,
    conditioned_ftle_distribution,
    fk_lambda,
    fk_phi,
    fk_psi,
    haar_grassmann_sample,
    liouville_check,
    oseledets_estimate,
    q_process_qr_run,
    qr_spectrum,
    qr_spectrum_ensemble,
    scaled_factorization,
    singular_value_bracketing,
    singular_value_ftle,
    wedge_log_norm,
)
from .qprocess import (
    QKernel,
    SurvivorEnsemble,
    build_q_kernel,
    check_q_stationarity,
    conditioned_ensemble,
    q_expectation_reweighted,
    q_sde_ensemble,
    sample_q_chain,
    sample_q_sde,
    transfer_check,
)
from .seeding import substream
from .spectral import (
    EtaField,
    SpectralData,
    SubstochasticMatrix,
    UlamGrid,
    build_ulam_operator,
    estimate_survival_rate,
    quasi_ergodic,
    solve_qsd,
    tv_decay_diagnostic,
)
from . import systems
