"""Generalized and zero-inflated cluster-weighted models fit by EM."""

from .data import (CovariateSpec, Dataset, DesignMatrix, DesignSpec, Schema, build_design,
                   load_csv, write_csv)
from .em import (ComponentParams, GcwmModel, InitStrategy, StopRule, estep, fit_gcwm, mstep,
                 observed_loglik)
from .errors import (CollapseError, ConvergenceError, DegenerateError, GcwmError, InputError,
                     NestingError, SizingError)
from .metrics import ConfusionReport, adjusted_rand_index, confusion_report
from .selection import InfoCriteria, LrTestResult, info_criteria, select_k, zero_inflation_lr_test
from .zigcwm import ZipFit, fit_zigcwm, fit_zip_cluster, zip_em

__version__ = "0.1.0"

__all__ = [
    "CollapseError", "ComponentParams", "ConfusionReport", "ConvergenceError",
    "CovariateSpec", "DegenerateError", "Dataset", "DesignMatrix", "DesignSpec",
    "GcwmError", "GcwmModel", "InfoCriteria", "InitStrategy", "InputError",
    "LrTestResult", "NestingError", "Schema", "SizingError", "StopRule", "ZipFit",
    "adjusted_rand_index", "build_design", "confusion_report", "estep", "fit_gcwm",
    "fit_zigcwm", "fit_zip_cluster", "info_criteria", "load_csv", "mstep",
    "observed_loglik", "select_k", "write_csv", "zero_inflation_lr_test", "zip_em",
]
