"""Poisson spectral fitting with the C statistic and calibrated goodness of fit."""

__version__ = "0.1.0"

from .cstat import CValue, c_function, c_gradient, c_per_bin, score
from .cumulants import (CumulantSet, CumulantTable, GridSpec, build_table, cumulants_at,
                        default_table)
from .errors import (BoundaryWarning, BudgetWarning, CstatError, DomainError, FitError,
                     FloorClampWarning, GofError, IllConditionedError, ModelViolationError,
                     TableError)
from .fitting import FitResult, fisher_information, fit_mle
from .gof import (GofResult, MomentPair, conditional_moments, corrected_z_first,
                  corrected_z_high, double_bootstrap, loglinear_conditional_moments,
                  lr_chi2_test, naive_z_boot, naive_z_highorder, parametric_bootstrap,
                  quadratic_form_Q, unconditional_moments)
from .models import (BinnedDataset, Constant, FoldedModel, InstrumentResponse, LogLinear,
                     ParameterVector, PowerLaw, PowerLawWithLine, expected_counts,
                     gradient_expected_counts, rebin, simulate_counts)

__all__ = [name for name in dir() if not name.startswith("_")]
