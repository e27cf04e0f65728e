"""Rolling-horizon black-start planning and co-simulation for distribution feeders.

The package couples three layers:

* a tagged MILP modeling core with a HiGHS backend (:mod:`flexstart.milp`),
* behind-the-meter house models that trade flexibility envelopes for dispatch
  signals (:mod:`flexstart.house`),
* a feeder restoration MILP with frequency security and switching rules
  (:mod:`flexstart.restoration`), driven step by step by the receding-horizon
  coordinator (:mod:`flexstart.coordinator`).
"""

__version__ = "0.1.0"

from flexstart.milp import (  # noqa: F401
    BigMConfig,
    Constraint,
    LinExpr,
    Model,
    ModelError,
    SolveLimits,
    SolveResult,
    VarId,
    solve,
)
