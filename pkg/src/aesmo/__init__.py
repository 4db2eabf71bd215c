"""Attractive-ellipsoid sliding-mode observer for Li-ion state-of-charge estimation."""

from .ecm import (
    CellParams,
    EcmState,
    OcvPolynomial,
    ParamIntervals,
    SystemMatrices,
    build_matrices,
    delta_a_norm_bound,
    derivative,
    estimate_lipschitz,
    ocv_eval,
    ocv_slope,
    phi,
    secant_alpha1,
    step,
    terminal_voltage,
)
from .errors import (
    AesmoError,
    DegenerateFitError,
    FitError,
    InfeasibleError,
    NoPulseError,
    ObservabilityError,
    TelemetryFormatError,
    ValidationError,
)
from .harness import (
    DisturbanceSpec,
    RunReport,
    Telemetry,
    add_noise,
    compare,
    default_gains,
    generate_dynamic_cycle,
    generate_hppc_eval,
    load_telemetry,
    monte_carlo_rint,
    run_estimation,
    save_telemetry,
    simulate_truth,
)
from .ident import (
    IdentResult,
    PulseSchedule,
    coulomb_count,
    fit_ocv_polynomial,
    fit_rc_pairs,
    fit_rint,
    generate_ident_profile,
    identify,
)
from .lmi import (
    LmiCertificate,
    SynthesisConfig,
    assemble_w_tilde,
    check_feasible,
    compute_c,
    eig_sym,
    error_bound_envelope,
    p_attr,
    synthesize_gain,
)
from .observer import (
    AesmoGains,
    UkfConfig,
    aesmo_step,
    compute_ls,
    luenberger_step,
    output_error,
    sign_vec,
    ukf_step,
)

__version__ = "0.1.0"
