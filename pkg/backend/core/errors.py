# backend/core/errors.py
"""
OpfIQ exception hierarchy.
Every error knows the CLI exit status it maps to (1 = domain failure, 2 = usage/config).
"""

from typing import Optional


class OpfIqError(Exception):
    exit_status: int = 1


# ── grid_model ────────────────────────────────────────────────

class MalformedCase(OpfIqError):
    exit_status = 2

    def __init__(self, message: str, line: Optional[int] = None, table: Optional[str] = None):
        self.line  = line
        self.table = table
        where = []
        if table:
            where.append(f"table '{table}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class UnsupportedFeature(MalformedCase):
    pass


class SingularBranch(OpfIqError):
    pass


# ── power_flow / opf ──────────────────────────────────────────

class SingularJacobian(OpfIqError):
    pass


class Diverged(OpfIqError):

    def __init__(self, message: str, solution=None):
        self.solution = solution
        super().__init__(message)


class Infeasible(OpfIqError):

    def __init__(self, message: str, solution=None):
        self.solution = solution
        super().__init__(message)


class NotConverged(OpfIqError):
    pass


class DimensionMismatch(OpfIqError):
    pass


# ── datagen ───────────────────────────────────────────────────

class Exhausted(OpfIqError):

    def __init__(self, message: str, dataset=None):
        self.dataset = dataset
        super().__init__(message)


class TooSmall(OpfIqError):
    pass


class FormatVersionMismatch(OpfIqError):
    exit_status = 2


class DatasetIOError(OpfIqError):
    pass


# ── neural / experiments ──────────────────────────────────────

class ShapeMismatch(OpfIqError):
    pass


class NonFiniteLoss(OpfIqError):

    def __init__(self, message: str, history=None):
        self.history = history or []
        super().__init__(message)


class EmptyInput(OpfIqError):
    pass


class NonPositiveTrueCost(OpfIqError):
    pass


# ── cli ───────────────────────────────────────────────────────

class ConfigError(OpfIqError):
    exit_status = 2
