"""Per-unit grid model and power-flow solvers."""
from .grid import (
    BUNDLED,
    BaseQuantities,
    BusRecord,
    GridError,
    GridModel,
    GridParseError,
    IllConditionedGridError,
    LineRecord,
    TopologyError,
    build_grid,
    format_grid,
    load_grid,
    parse_grid,
    save_grid,
)
from .kernels import BACKEND
from .solvers import (
    BusInjection,
    DivergenceError,
    OracleFailure,
    PowerFlowError,
    VoltageProfile,
    injection_arrays,
    solve_fixed_point,
    solve_fixed_point_diff,
    solve_newton,
    sweep_fixed,
    violation_magnitude,
    violation_terms,
    voltage_magnitude,
)
