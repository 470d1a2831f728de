"""
Disentangle - Core Module
Library layer: autodiff, random streams, the data-generating process, the MLP,
decompositions, reporting and run artifacts
"""

from .errors import (
    ArtifactError,
    ConfigError,
    ContractViolation,
    HarnessError,
    MethodError,
    NumericError,
    ReportingError,
    TrainingError,
)

__all__ = [
    'ArtifactError',
    'ConfigError',
    'ContractViolation',
    'HarnessError',
    'MethodError',
    'NumericError',
    'ReportingError',
    'TrainingError',
]
