"""
Disentangle - Error Types
Exception hierarchy shared by the library layer, the methods and the harness
"""

from typing import Optional


class HarnessError(RuntimeError):
    """Base class for every error raised by the harness"""


class ContractViolation(HarnessError, ValueError):
    """A precondition, shape or range requirement was not met"""


class NumericError(HarnessError, ArithmeticError):
    """A computation produced NaN or Inf"""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(f"non-finite output in '{op}'" + (f": {message}" if message else ""))


class TrainingError(HarnessError):
    """Training diverged"""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}" + (f": {message}" if message else ""))


class MethodError(HarnessError):
    """Fitting or sampling of an uncertainty method failed"""

    def __init__(self, method: str, message: str, member: Optional[int] = None):
        self.method = method
        self.member = member
        where = f"{method}[member {member}]" if member is not None else method
        super().__init__(f"{where}: {message}")


class ReportingError(HarnessError):
    """Metric computation received non-finite inputs"""

    def __init__(self, x: float, message: str = ""):
        self.x = x
        super().__init__(f"non-finite value at x={x!r}" + (f": {message}" if message else ""))


class ConfigError(HarnessError):
    """Experiment configuration is malformed or inconsistent"""

    def __init__(self, key_path: str, message: str):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


class ArtifactError(HarnessError):
    """A run directory is missing files or has no manifest"""
