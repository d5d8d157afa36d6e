"""Drone-assisted traffic state and incident estimation on a freeway corridor."""

from .ctm import (
    BoundaryConditions,
    CellParameters,
    CorridorGeometry,
    DomainError,
    FundamentalDiagram,
    ctm_step,
    interface_flow,
    speed_from_density,
    updated_critical_density,
)
from .kernels import BACKEND

__version__ = "0.1.0"
