"""Fuzzy-measure Bellman operators for constrained MDPs under transition ambiguity."""
from .measure import FuzzyMeasure, MeasureField, solve_lambda
from .choquet import choquet_integral, dual_choquet_integral
from .cmdp import GridSpec, TabularCMDP, build_double_integrator, load_cmdp, write_cmdp
from .uncertainty import UncertaintyLevels
from .bellman import Operator, value_iteration

__all__ = [
    "FuzzyMeasure", "MeasureField", "solve_lambda", "choquet_integral", "dual_choquet_integral",
    "GridSpec", "TabularCMDP", "build_double_integrator", "load_cmdp", "write_cmdp",
    "UncertaintyLevels", "Operator", "value_iteration",
]
