"""Numerical laboratory for Ornstein-Uhlenbeck semigroups.

Modules: :mod:`core` (covariances, drift group, invariant measure),
:mod:`kernel` (Mehler kernel and routes to ``H_t f``), :mod:`geometry`
(polar coordinates, tubes, annulus), :mod:`maximal` (maximal operator and
level-set scans), :mod:`process` (exact path simulation) and :mod:`cli`.
"""

from .core import OUModel, build_model, gaussian_measure
from .errors import (ModelInvalid, NumericalError, OULabError)
from .kernel import (apply_semigroup, dirac_approx, gaussian_bump, indicator_ball,
                     mehler_log_kernel, polynomial)
from .maximal import level_set_measure, maximal_function

__all__ = ["OUModel", "build_model", "gaussian_measure", "ModelInvalid",
           "NumericalError", "OULabError", "apply_semigroup", "dirac_approx",
           "gaussian_bump", "indicator_ball", "mehler_log_kernel", "polynomial",
           "level_set_measure", "maximal_function"]
