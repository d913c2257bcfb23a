"""aseplab: exact continuous-time ASEP simulation and verification lab."""

from .lattice import (
    Configuration,
    DensityProfile,
    Rates,
    Ring,
    Segment,
    char_speed,
    flux,
    mean_current,
    sample_config,
)
from .rng import RngStream
from .engine import (
    ClockSuite,
    General,
    NearestNeighbor,
    Trajectory,
    auto_window,
    check_product_invariance,
    run,
    run_general,
    run_reduced,
)
from .couplings import (
    LayeredState,
    SecondClassTracker,
    measure_label_tail,
    run_basic_coupling,
    run_concavity_coupling,
)
from .observables import (
    CurrentLedger,
    EstimateWithCI,
    PsiSeries,
    current,
    derivative_identity_check,
    estimate_moment,
    estimate_psi,
    estimate_two_point,
    fit_exponent,
    psi_series,
    variance_identity_check,
)
from .oracle import (
    EnvironmentSchedule,
    exact_distribution,
    exact_second_class,
    geometric_pi,
    simulate_reflected_walk,
)
from .experiments import ExperimentSpec, ResultRow, emit, parse_spec_file, run_experiment
from .parallel import run_replicas

__version__ = "0.1.0"
