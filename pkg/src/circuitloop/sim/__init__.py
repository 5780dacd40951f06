"""Embedded circuit simulator: MNA core plus the four analyses."""

from .analyses import (AllPointsFailed, UnknownSource, ac_response, dc_sweep,
                       log_grid, operating_point, transient, write_table)
from .mna import NonConvergence, SolveReport, Strategy, System

__all__ = [
    "AllPointsFailed",
    "NonConvergence",
    "SolveReport",
    "Strategy",
    "System",
    "UnknownSource",
    "ac_response",
    "dc_sweep",
    "log_grid",
    "operating_point",
    "transient",
    "write_table",
]
