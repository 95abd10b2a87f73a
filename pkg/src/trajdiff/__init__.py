"""Constraint-aware diffusion models for warm-starting trajectory optimization."""

__version__ = "0.1.0"

from .problems import Task, TaskKind, make_task, tabletop, two_car  # noqa: E402
from .solver import SolveOptions, SolveResult, Status, solve, warm_start  # noqa: E402

__all__ = [
    "Task", "TaskKind", "make_task", "tabletop", "two_car",
    "SolveOptions", "SolveResult", "Status", "solve", "warm_start",
]
