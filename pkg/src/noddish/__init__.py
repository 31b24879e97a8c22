"""NODDI-SH and FORECAST: analytic spherical-harmonic signal models for diffusion MRI.

Volume fractions come from matching per-shell spherical means against a
precomputed dictionary; the fiber ODF comes from a positivity-constrained
least-squares fit in a real symmetric SH basis.
"""
from .errors import InvalidArgumentError, NumericError, ParseError, SolverError
from .fodf import (FodfCoefficients, FodfFitter, PeakSet, QpSolution, angular_error,
                   extract_peaks, fit_fodf)
from .kernels import (FORECAST, NODDI_SH, DiffusivitySet, SignalBasisMatrix, VolumeFractions,
                      forecast_basis, noddish_basis, phi_l, psi_l)
from .phantom import (KentParams, PhantomVoxelSpec, add_rician_noise, kent_pdf, sample_kent,
                      synth_signal)
from .pipeline import FitConfig, FitReport, fit_volume, fit_voxels, subsample_scheme
from .scheme import AcquisitionScheme, hcp_like_scheme
from .sh import SphericalGrid, eval_sh, make_hemisphere_grid, sh_expand_on_grid
from .smt import build_dictionary, estimate_forecast_diffusivities, estimate_fractions, shell_means

__version__ = "0.1.0"
