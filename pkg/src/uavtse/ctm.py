"""Cell transmission model with a triangular fundamental diagram.

Densities are in veh/km, speeds in km/h, lengths in km and durations in h.
A density field is a plain 1-D float array with one entry per cell; an
ensemble of fields is a 2-D array with one column per member.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class DomainError(ValueError):
    """Raised when an input lies outside the physical domain."""


@dataclass(frozen=True)
class FundamentalDiagram:
    v_max: float
    rho_cr: float
    rho_j: float

    def __post_init__(self):
        if not self.v_max > 0:
            raise DomainError(f"v_max must be positive, got {self.v_max}")
        if not 0 < self.rho_cr < self.rho_j:
            raise DomainError(
                f"need 0 < rho_cr < rho_j, got rho_cr={self.rho_cr}, rho_j={self.rho_j}"
            )

    @property
    def wave_speed(self) -> float:
        """Backward wave speed of the congested branch (km/h)."""
        return self.v_max * self.rho_cr / (self.rho_j - self.rho_cr)

    @property
    def capacity(self) -> float:
        return self.v_max * self.rho_cr


@dataclass(frozen=True)
class CorridorGeometry:
    num_cells: int
    dx: float
    dt: float
    node_positions: dict = field(default_factory=dict)
    offramp_cell: int = -1
    incident_cells: tuple = ()
    lanes: int = 3

    def __post_init__(self):
        if self.num_cells < 1:
            raise DomainError("corridor needs at least one cell")
        if self.dx <= 0 or self.dt <= 0:
            raise DomainError("dx and dt must be positive")
        object.__setattr__(self, "incident_cells", tuple(int(c) for c in self.incident_cells))
        for c in self.incident_cells:
            if not 0 <= c < self.num_cells:
                raise DomainError(f"incident cell {c} outside [0, {self.num_cells})")
        if self.offramp_cell >= self.num_cells:
            raise DomainError(f"offramp cell {self.offramp_cell} outside corridor")

    @classmethod
    def from_fd(cls, fd: FundamentalDiagram, num_cells: int, dt: float, **kwargs):
        """Build a geometry with ``dx = v_max * dt`` for the baseline diagram."""
        return cls(num_cells=num_cells, dx=fd.v_max * dt, dt=dt, **kwargs)

    def check_cfl(self, fd: FundamentalDiagram, rtol: float = 1e-9):
        """Check the baseline coupling ``dx == v_max * dt``."""
        if abs(self.dx - fd.v_max * self.dt) > rtol * self.dx:
            raise DomainError(
                f"dx={self.dx} km does not match v_max*dt={fd.v_max * self.dt} km"
            )

    def node(self, number: int) -> int:
        return self.node_positions[number]


@dataclass(frozen=True)
class BoundaryConditions:
    inflow_demand: float = 0.0  # veh/h
    offramp_split: float = 0.0
    open_downstream: bool = True
    offramp_capacity: float = float("inf")  # veh/h

    def __post_init__(self):
        if self.inflow_demand < 0:
            raise DomainError("inflow demand must be non-negative")
        if not 0.0 <= self.offramp_split <= 1.0:
            raise DomainError("offramp split must lie in [0, 1]")
        if not self.offramp_capacity > 0:
            raise DomainError("offramp capacity must be positive")

    @classmethod
    def closed(cls):
        return cls(inflow_demand=0.0, offramp_split=0.0, open_downstream=False)


@dataclass
class CellParameters:
    """Per-cell fundamental diagram parameters stored as arrays."""

    v_max: np.ndarray
    rho_cr: np.ndarray
    rho_j: np.ndarray

    @classmethod
    def uniform(cls, fd: FundamentalDiagram, num_cells: int) -> "CellParameters":
        return cls(
            np.full(num_cells, float(fd.v_max)),
            np.full(num_cells, float(fd.rho_cr)),
            np.full(num_cells, float(fd.rho_j)),
        )

    @classmethod
    def from_diagrams(cls, fds) -> "CellParameters":
        fds = list(fds)
        return cls(
            np.array([f.v_max for f in fds], dtype=float),
            np.array([f.rho_cr for f in fds], dtype=float),
            np.array([f.rho_j for f in fds], dtype=float),
        )

    def __len__(self):
        return len(self.v_max)

    def __getitem__(self, i) -> FundamentalDiagram:
        return FundamentalDiagram(float(self.v_max[i]), float(self.rho_cr[i]), float(self.rho_j[i]))

    def copy(self) -> "CellParameters":
        return CellParameters(self.v_max.copy(), self.rho_cr.copy(), self.rho_j.copy())

    def with_cell(self, i: int, fd: FundamentalDiagram) -> "CellParameters":
        out = self.copy()
        out.v_max[i] = fd.v_max
        out.rho_cr[i] = fd.rho_cr
        out.rho_j[i] = fd.rho_j
        return out

    @property
    def wave_speed(self) -> np.ndarray:
        return self.v_max * self.rho_cr / (self.rho_j - self.rho_cr)


def speed_from_density(rho, fd: FundamentalDiagram):
    """Speed on the triangular diagram; accepts scalars or arrays."""
    rho_arr = np.asarray(rho, dtype=float)
    tol = 1e-9 * fd.rho_j
    if np.any(rho_arr < -tol) or np.any(rho_arr > fd.rho_j + tol):
        raise DomainError(f"density outside [0, {fd.rho_j}]")
    out = speeds(rho_arr, fd.v_max, fd.rho_cr, fd.rho_j)
    return float(out) if out.ndim == 0 else out


def speeds(rho, v_max, rho_cr, rho_j):
    """Broadcasting speed kernel without domain checks.

    Any argument may be an array, so this evaluates one density against many
    candidate diagrams (or the reverse) in a single call.
    """
    rho, v_max, rho_cr, rho_j = np.broadcast_arrays(
        np.asarray(rho, float), np.asarray(v_max, float),
        np.asarray(rho_cr, float), np.asarray(rho_j, float),
    )
    congested = rho > rho_cr
    safe_rho = np.where(congested, rho, 1.0)
    cong = v_max * rho_cr * (rho_j - rho) / (safe_rho * (rho_j - rho_cr))
    return np.where(congested, np.maximum(cong, 0.0), v_max)


def updated_critical_density(v_max_t, fd0: FundamentalDiagram):
    """Critical density for a new free-flow speed, holding the backward wave fixed."""
    v = np.asarray(v_max_t, dtype=float)
    if np.any(~(v > 0)):
        raise DomainError("free-flow speed must be positive")
    num = fd0.rho_cr * fd0.v_max * fd0.rho_j
    out = num / (v * (fd0.rho_j - fd0.rho_cr) + fd0.rho_cr * fd0.v_max)
    return float(out) if out.ndim == 0 else out


def incident_diagram(v_max_t: float, fd0: FundamentalDiagram) -> FundamentalDiagram:
    """Diagram for a reduced free-flow speed with the baseline backward wave."""
    return FundamentalDiagram(float(v_max_t), updated_critical_density(v_max_t, fd0), fd0.rho_j)


def sending(n, fd: FundamentalDiagram, geom: CorridorGeometry, capacity_clamp=False):
    """Vehicles a cell can release in one step."""
    s = fd.v_max * geom.dt / geom.dx * n
    if capacity_clamp:
        s = min(s, fd.capacity * geom.dt)
    return s


def receiving(n, fd: FundamentalDiagram, geom: CorridorGeometry, capacity_clamp=False):
    """Vehicles a cell can accept in one step."""
    r = fd.wave_speed * geom.dt / geom.dx * (fd.rho_j * geom.dx - n)
    if capacity_clamp:
        r = min(r, fd.capacity * geom.dt)
    return max(r, 0.0)


def interface_flow(n_up, n_down, fd: FundamentalDiagram, geom: CorridorGeometry,
                   capacity_clamp=False, fd_down: FundamentalDiagram | None = None):
    """Vehicles crossing the boundary between two adjacent cells in one step.

    For a cell with the baseline diagram (``dx == v_max*dt``) this is
    ``min(n_up, rho_cr/(rho_j - rho_cr) * (rho_j*dx - n_down))``. When the
    cells carry different diagrams, the upstream one sets the sending term and
    ``fd_down`` the receiving term.
    """
    fd_down = fd if fd_down is None else fd_down
    if n_up < 0 or n_down < 0:
        raise DomainError("vehicle counts must be non-negative")
    tol = 1e-9
    if n_up > fd.rho_j * geom.dx * (1 + tol) or n_down > fd_down.rho_j * geom.dx * (1 + tol):
        raise DomainError("vehicle count above jam capacity of the cell")
    y = min(sending(n_up, fd, geom, capacity_clamp), receiving(n_down, fd_down, geom, capacity_clamp))
    return max(y, 0.0)


def _check_cfl(params: CellParameters, geom: CorridorGeometry):
    courant = max(np.max(params.v_max), np.max(params.wave_speed)) * geom.dt / geom.dx
    if courant > 1 + 1e-9:
        raise DomainError(f"CFL violated: courant number {courant:.6f} > 1")


def ctm_step_counts(n, params: CellParameters, bc: BoundaryConditions,
                    geom: CorridorGeometry, capacity_clamp=False):
    """Advance vehicle counts; ``n`` may be one field or a (cells x members) ensemble.

    Returns ``(new_counts, boundary)`` with ``boundary`` rows (entered,
    off-ramp, discharged) in vehicles.
    """
    _check_cfl(params, geom)
    return kernels.ctm_step_counts(
        n, params.v_max, params.rho_cr, params.rho_j, geom.dx, geom.dt,
        bc.inflow_demand * geom.dt, geom.offramp_cell, bc.offramp_split,
        bc.open_downstream, capacity_clamp, bc.offramp_capacity * geom.dt,
    )


def ctm_step(rho, params, bc: BoundaryConditions, geom: CorridorGeometry, capacity_clamp=False):
    """One CTM step on densities (veh/km).

    ``params`` is a :class:`CellParameters` or a sequence of per-cell
    :class:`FundamentalDiagram`. ``rho`` may be a single field or an
    ensemble with members in columns.
    """
    if not isinstance(params, CellParameters):
        params = CellParameters.from_diagrams(params)
    rho = np.asarray(rho, dtype=float)
    if rho.shape[0] != len(params):
        raise DomainError(f"field has {rho.shape[0]} cells, parameters have {len(params)}")
    rj = params.rho_j if rho.ndim == 1 else params.rho_j[:, None]
    if np.any(rho < 0) or np.any(rho > rj * (1 + 1e-12)):
        raise DomainError("density outside [0, rho_j]")
    new, _ = ctm_step_counts(rho * geom.dx, params, bc, geom, capacity_clamp)
    return new / geom.dx


__all__ = [
    "BoundaryConditions",
    "CellParameters",
    "CorridorGeometry",
    "DomainError",
    "FundamentalDiagram",
    "ctm_step",
    "ctm_step_counts",
    "incident_diagram",
    "interface_flow",
    "receiving",
    "sending",
    "speed_from_density",
    "speeds",
    "updated_critical_density",
]
