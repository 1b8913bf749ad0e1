"""Numerical laboratory for the critical 2d stochastic heat flow.

Layers, bottom to top:

* special_functions -- Volterra nu / nu' and the planar heat kernel.
* kernels           -- variance kernel K_t, semigroup kernel P_t, polymer
                       total mass, drift field, Doob transition density,
                       radial tabulation with interpolation.
* measures          -- grid-discretized measure algebra (Gaussian gluing,
                       projections) and the moment densities U, Q, K with
                       the Chapman-Kolmogorov second-moment defect.
* she               -- Monte Carlo Feynman-Kac simulation of the mollified
                       2d stochastic heat equation at critical coupling.
* polymer           -- sampling of the singular-drift polymer SDE, local
                       and intersection times, Radon-Nikodym reweighting.
* harness           -- named reproducible experiments with cached kernel
                       tables and persisted reports.
* cli               -- the `shflab` command.
"""

__version__ = "0.1.0"

from .errors import (CacheVersionError, DomainError, GridMismatchError,
                     SchemaError, SingularityError, WindowExitError)
from .special_functions import (A_MAX, CONSTANTS, EULER_MASCHERONI, Constants,
                                VolterraEval, gauss_heat, volterra_eval,
                                volterra_nu, volterra_nu_prime)
from .kernels import (DisorderParam, DriftEval, KernelGrid, as_disorder,
                      build_kernel_grid, doob_density, doob_radial, drift,
                      drift_radial, k_kernel, k_matrix, k_pointwise,
                      kernel_upper_envelope, p_convolve, p_kernel, total_mass,
                      total_mass_radial)
from .measures import (GridMeasure, MomentDensity, Partition, SlotGrid,
                       blur_slot, bullet_density, bullet_sigma, chapman_defect,
                       circ_sigma, gaussian_q_pairing, gaussian_u_pairing,
                       project, q_density, q_variance_form, u_density)
from .she import (ChapmanMCEstimate, CouplingSchedule, FeynmanKacEstimate,
                  LatticeSpec, MollifierSpec, NoiseRealization, PairingEstimate,
                  TruncatedGaussian, chapman_mc, compute_i_j, coupling,
                  estimate_variance_pairing, feynman_kac, log_weight_variance,
                  sample_noise)
from .polymer import (DoobEnsemble, DriftTableFamily, GoodnessOfFit,
                      LocalTimeEstimate, PathEnsemble, RNCheckResult,
                      RNReweightReport, chain_grid_spec, finite_dim_v_density,
                      intersection_time, local_time, rn_reweight_check,
                      sample_doob_paths, sample_paths, transition_check)
from .harness import (CheckResult, ExperimentConfig, ExperimentReport,
                      get_kernel_grid, load_config_file, run_experiment)

__all__ = [
    "A_MAX", "CONSTANTS", "EULER_MASCHERONI", "CacheVersionError",
    "ChapmanMCEstimate", "CheckResult", "Constants", "CouplingSchedule",
    "DisorderParam", "DomainError", "DoobEnsemble", "DriftEval",
    "DriftTableFamily", "ExperimentConfig", "ExperimentReport",
    "FeynmanKacEstimate", "GoodnessOfFit", "GridMeasure", "GridMismatchError",
    "KernelGrid", "LatticeSpec", "LocalTimeEstimate", "MollifierSpec",
    "MomentDensity", "NoiseRealization", "PairingEstimate", "Partition",
    "PathEnsemble", "RNCheckResult", "RNReweightReport", "SchemaError",
    "SingularityError", "SlotGrid", "TruncatedGaussian", "VolterraEval",
    "WindowExitError", "as_disorder", "blur_slot", "build_kernel_grid",
    "bullet_density",
    "bullet_sigma", "chain_grid_spec", "chapman_defect", "chapman_mc",
    "circ_sigma", "compute_i_j", "coupling", "doob_density", "doob_radial",
    "drift", "drift_radial", "estimate_variance_pairing", "feynman_kac",
    "finite_dim_v_density", "gauss_heat", "gaussian_q_pairing",
    "gaussian_u_pairing", "get_kernel_grid", "intersection_time", "k_kernel",
    "k_matrix", "k_pointwise", "kernel_upper_envelope", "load_config_file",
    "local_time",
    "log_weight_variance", "p_convolve", "p_kernel", "project", "q_density",
    "q_variance_form", "run_experiment", "sample_doob_paths", "sample_noise",
    "sample_paths", "total_mass", "total_mass_radial", "transition_check",
    "u_density", "volterra_eval", "volterra_nu", "volterra_nu_prime",
]
