"""Standard, data-consistent (DC) and DC-WME strong-constraint 4D-Var."""
from .assimilate import AssimilationRun, CycleConfig, run_cycles
from .cost import CostEvaluation, WindowProblem, make_window
from .cov import CovarianceSpec, make_covariance
from .dynamics import ModelSpec, lorenz63, lorenz96
from .errors import (ConfigError, CycleDiverged, DcvarError, DegenerateGramMatrix,
                     DimensionMismatch, LineSearchFailure, NonFinite, NonFiniteAtStart, NonSPD)
from .observation import ObservationOperator, ObservationSet
from .optimize import LbfgsOptions, OptimResult, minimize

__version__ = "0.1.0"
