"""Voltage-reduction reactive dispatch for unbalanced radial feeders under
load/PV uncertainty."""

from .feeder import (
    Bus, Feeder, FeederError, Line, build_incidence, build_sensitivities,
    load_feeder, save_feeder, three_phase_effective_impedance, validate_radial,
)
from .loads import (
    PvInverter, ZipCoefficients, pv_reactive_capability, pv_reactive_output,
    zip_power_exact, zip_power_linearized,
)
from .dispatch import (
    DispatchProblem, DispatchSolution, SolverConfig, UncertaintyVectorLayout,
    assemble_chance_rows, assemble_voltage_affine, build_layout, build_problem,
    check_denominator_positivity, soc_radius, solve_dispatch,
)
from .enrichment import (
    HighResSeries, HourlySeries, MomentAmbiguitySet, blend_teachers,
    compute_learning_weights, enrich_hour, enrich_series, estimate_moments,
    fit_bound_models, fit_transition_model, load_moments, save_moments,
)
from .validation import (
    energy_report, monte_carlo_violation, nonlinear_sweep, wilson_upper,
)

__version__ = "0.1.0"
