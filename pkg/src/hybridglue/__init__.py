"""Hybrid systems with state jumps, gluing maps, and glued observers and trackers."""

from .errors import HybridGlueError
from .gluing import GluedSystem, GluingMap, InvariantSetSpec, check_gluing_axioms, simulate_glued
from .hybrid_core import HybridExecution, HybridSystem, SimParams, simulate_hybrid
from .models import bouncing_ball, list_models, reflected_double_integrator, ripple_model

__version__ = "0.1.0"

__all__ = [
    "GluedSystem",
    "GluingMap",
    "HybridExecution",
    "HybridGlueError",
    "HybridSystem",
    "InvariantSetSpec",
    "SimParams",
    "bouncing_ball",
    "check_gluing_axioms",
    "list_models",
    "reflected_double_integrator",
    "ripple_model",
    "simulate_glued",
    "simulate_hybrid",
]
