"""Structured-sparse subspace optimizers with desk-scale experiments."""

from .errors import ConfigError, GrassError, InvalidInputError, ProtocolError, ReconciliationError, StateError
from .optim import MesoConfig, MesoOptimizer, Schedule, adam_init, adam_update, lr_at, meso_step
from .projection import ProjectionKind, SparseProjection, compute_p, project, reconstruct

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GrassError",
    "InvalidInputError",
    "MesoConfig",
    "MesoOptimizer",
    "ProjectionKind",
    "ProtocolError",
    "ReconciliationError",
    "Schedule",
    "SparseProjection",
    "StateError",
    "adam_init",
    "adam_update",
    "compute_p",
    "lr_at",
    "meso_step",
    "project",
    "reconstruct",
]
