"""Nonlocal multi-continuum (NLMC) numerical upscaling for porous media flow.

Fine-grid TPFA reference solvers, constrained multiscale basis functions,
nonlinear and space-time downscaling maps, learned nonlinear transmissibilities
and the experiment harness tying them together.
"""

__version__ = "0.1.0"

from .mesh import (FineGrid, CoarseGrid, OversampleRegion, SpaceTimePartition,
                   build_grids, oversample, build_partition_of_unity, build_cutoff)
from .media import (CoefficientField, FractureSet, MonotoneLaw, ConstitutiveSet,
                    WeightField, generate_field, rasterize_fractures, evaluate_law,
                    check_law_assumptions, compute_weights)
from .fine_solver import (NewtonConfig, assemble_linear, solve_linear, solve_monotone,
                          solve_unsaturated, solve_two_phase, conservation_residual)
from .continua import AuxiliarySpace, MacroState, build_continua, project, extract_macro
from .basis import (build_basis_linear, build_all_basis, assemble_upscaled,
                    solve_coarse_linear, energy_norm, s_norm)
from .downscaling import (local_downscale_nonlinear, global_downscale_nonlinear,
                          solve_coarse_nonlinear)
from .spacetime import build_spacetime_continua, local_spacetime_downscale, solve_spacetime_coarse
from .surrogate import (metrics, build_face_table, compute_transmissibility,
                        generate_dataset, train, solve_coarse_with_surrogate,
                        baseline_upscale)
from .config import ExperimentConfig, load_config, save_config
from .experiments import coarse_mean_error, run_convergence_study, run_test1, run_test2
