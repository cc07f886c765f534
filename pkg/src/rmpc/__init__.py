"""Robust MPC for linear systems with polytopic model uncertainty and additive disturbances."""
from rmpc.bounds import TighteningBounds, compute_bounds, soundness_check
from rmpc.model import TrueRealization, UncertainSystem, example_system
from rmpc.mpc import MPCOptions, OfflineData, RobustMPC, horizon_length
from rmpc.polytope import HPolytope
from rmpc.terminal import TerminalIngredients, compute_terminal

__all__ = [
    "HPolytope",
    "MPCOptions",
    "OfflineData",
    "RobustMPC",
    "TerminalIngredients",
    "TighteningBounds",
    "TrueRealization",
    "UncertainSystem",
    "compute_bounds",
    "compute_terminal",
    "horizon_length",
    "example_system",
    "soundness_check",
]
