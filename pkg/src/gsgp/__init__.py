"""Gaussian-process regression with structured kernel interpolation (SKI) and
its grid-structured reformulation (GSGP), whose solver iterations cost
O(m log m) independent of the number of data points."""

from .grid import Grid, ToeplitzOperator, build_toeplitz_operator, fit_grid, kg_dense, kg_matvec
from .interp import (InterpMatrix, InterpolationError, Scheme, SufficientStats, build_W, interp_weights,
                     memory_footprint, stats_from_arrays, sufficient_stats, wt_matvec, w_matvec,
                     wtw_matvec)
from .kernels import Hyperparams, KernelFamily, KernelSpec, eval_kernel, preset, se_kernel
from .solvers import (ConvergenceError, FactorizedBasis, NotSPDError, SkiOperator, SolveResult,
                      SolverError, TridiagonalFactor, cg, efcg, efcg_simplified, efla,
                      factorized_inner, factorized_update, fcg, fla, lanczos, symmetric_gsgp_solve)
from .gp import (LoglikResult, PosteriorModel, exact_gp_reference, log_likelihood_gsgp,
                 log_likelihood_ski, posterior_cov_exact, posterior_cov_lowrank, posterior_mean_gsgp,
                 posterior_mean_ski, slq_logdet)
from .io import DataFormatError, ingest_csv, load_stats, save_stats

__version__ = "0.1.0"
