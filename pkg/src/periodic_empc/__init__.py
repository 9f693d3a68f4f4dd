"""Periodic economic MPC for pump scheduling in water distribution networks."""

from . import empc, hydronet, nlpsolve, sysid

__all__ = ["empc", "hydronet", "nlpsolve", "sysid"]
__version__ = "0.1.0"
