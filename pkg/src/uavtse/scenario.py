"""Synthetic ground truth for the freeway corridor and noisy sensor emission.

The truth is generated with the same CTM family the estimator uses (a twin
experiment). Time steps are counted from the start of estimation; a warm-up
period before step 0 lets the incident queue form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ctm import (
    BoundaryConditions,
    CellParameters,
    CorridorGeometry,
    FundamentalDiagram,
    ctm_step_counts,
    incident_diagram,
    speeds,
)
from .dual import DensityObs, SpeedObs, VmaxObs
from .rng import DRONE_EMIT, LOOP_EMIT, PROBE_EMIT, substream


@dataclass(frozen=True)
class Incident:
    cell: int
    v_max: float  # reduced free-flow speed, km/h
    start_step: int | None = None  # None: active from the start of the warm-up
    end_step: int | None = None  # exclusive; None: never cleared

    def active(self, step: int) -> bool:
        if self.start_step is not None and step < self.start_step:
            return False
        if self.end_step is not None and step >= self.end_step:
            return False
        return True


@dataclass(frozen=True)
class DroneState:
    cell: int
    heading: str = "upstream"
    view_cells: int = 1

    def __post_init__(self):
        if self.heading not in ("upstream", "downstream"):
            raise ValueError(f"unknown heading {self.heading!r}")
        if self.view_cells < 1:
            raise ValueError("drone must see at least one cell")

    def viewed(self, num_cells: int) -> np.ndarray:
        """Cells inside the view window, clipped at the corridor ends."""
        if not 0 <= self.cell < num_cells:
            raise ValueError(f"drone cell {self.cell} outside corridor")
        lo = self.cell - (self.view_cells - 1) // 2
        hi = self.cell + self.view_cells // 2
        return np.arange(max(lo, 0), min(hi, num_cells - 1) + 1)


def default_fd() -> FundamentalDiagram:
    return FundamentalDiagram(v_max=90.0, rho_cr=60.0, rho_j=300.0)


def default_geometry(fd0: FundamentalDiagram | None = None) -> CorridorGeometry:
    fd0 = fd0 or default_fd()
    return CorridorGeometry.from_fd(
        fd0, num_cells=20, dt=10.0 / 3600.0,
        node_positions={1: 0, 2: 10, 3: 10, 4: 19},
        offramp_cell=10, incident_cells=(5, 15), lanes=3,
    )


@dataclass(frozen=True)
class ScenarioConfig:
    geometry: CorridorGeometry = field(default_factory=default_geometry)
    fd0: FundamentalDiagram = field(default_factory=default_fd)
    demand: float = 6600.0  # veh/h at node 1
    offramp_split: float = 0.5
    offramp_capacity: float = 1125.0  # veh/h
    incidents: tuple = (Incident(5, 20.0), Incident(15, 20.0))
    initial_density: float = 30.0
    warmup_steps: int = 180
    capacity_clamp: bool = False
    loop_std: float = 10.0
    probe_std: float = 5.0
    drone_density_std: float = 1.0
    drone_vmax_std: float = 2.0
    loop_cadence: int = 1
    probe_cadence: int = 30
    drone_start_cell: int = 10
    drone_view_cells: int = 1
    drone_launch_step: int = 30  # first step the drone plans a move; it hovers before that

    def __post_init__(self):
        object.__setattr__(self, "incidents", tuple(self.incidents))
        geom = self.geometry
        geom.check_cfl(self.fd0)
        for inc in self.incidents:
            if inc.cell not in geom.incident_cells:
                raise ValueError(f"incident at cell {inc.cell} is not an incident-prone cell")
            if not 0 < inc.v_max < self.fd0.v_max:
                raise ValueError(f"reduced speed {inc.v_max} outside (0, {self.fd0.v_max})")
        if self.loop_cadence < 1 or self.probe_cadence < 1:
            raise ValueError("sensor cadences must be positive integers")
        if not 0 <= self.drone_start_cell < geom.num_cells:
            raise ValueError("drone start cell outside corridor")
        if self.warmup_steps < 0:
            raise ValueError("warm-up must be non-negative")
        if self.drone_launch_step < 0:
            raise ValueError("drone launch step must be non-negative")

    @property
    def boundary(self) -> BoundaryConditions:
        return BoundaryConditions(self.demand, self.offramp_split, True, self.offramp_capacity)

    def true_vmax(self, step: int) -> np.ndarray:
        """True free-flow speed at each incident-prone cell."""
        out = np.full(len(self.geometry.incident_cells), float(self.fd0.v_max))
        for inc in self.incidents:
            if inc.active(step):
                out[self.geometry.incident_cells.index(inc.cell)] = inc.v_max
        return out

    def true_parameters(self, step: int) -> CellParameters:
        params = CellParameters.uniform(self.fd0, self.geometry.num_cells)
        for inc in self.incidents:
            if inc.active(step):
                params = params.with_cell(inc.cell, incident_diagram(inc.v_max, self.fd0))
        return params


@dataclass
class TruthTrace:
    density: np.ndarray  # (T+1, K)
    vmax: np.ndarray  # (T+1, V)
    boundary: np.ndarray  # (T, 3): entered, off-ramp, discharged per step
    incident_cells: tuple

    @property
    def steps(self) -> int:
        return self.density.shape[0] - 1


def simulate_truth_step(cfg: ScenarioConfig, rho, step: int, with_flows=False):
    """One truth CTM step from ``step - 1`` to ``step``."""
    geom = cfg.geometry
    n, flows = ctm_step_counts(np.asarray(rho, float) * geom.dx, cfg.true_parameters(step - 1),
                               cfg.boundary, geom, cfg.capacity_clamp)
    rho = n / geom.dx
    return (rho, flows) if with_flows else rho


def generate_truth(cfg: ScenarioConfig, horizon: int) -> TruthTrace:
    geom = cfg.geometry
    rho = np.full(geom.num_cells, float(cfg.initial_density))
    for step in range(-cfg.warmup_steps + 1, 1):
        rho = simulate_truth_step(cfg, rho, step)
    dens = np.empty((horizon + 1, geom.num_cells))
    vmax = np.empty((horizon + 1, len(geom.incident_cells)))
    bnd = np.empty((horizon, 3))
    dens[0] = rho
    vmax[0] = cfg.true_vmax(0)
    for step in range(1, horizon + 1):
        rho, flows = simulate_truth_step(cfg, rho, step, with_flows=True)
        dens[step] = rho
        vmax[step] = cfg.true_vmax(step)
        bnd[step - 1] = flows
    return TruthTrace(dens, vmax, bnd, geom.incident_cells)


def emit_loop_obs(truth, noise_std, seed, step, rho_j=300.0) -> DensityObs:
    """Loop detector densities at every cell."""
    truth = np.asarray(truth, dtype=float)
    rng = substream(seed, LOOP_EMIT, step)
    vals = truth + noise_std * rng.standard_normal(truth.shape)
    return DensityObs(np.arange(truth.size), np.clip(vals, 0.0, rho_j), noise_std)


def emit_probe_speed_obs(truth, params: CellParameters, incident_cells, cadence, step,
                         noise_std, seed) -> SpeedObs | None:
    """Probe-vehicle speeds at incident cells on steps divisible by ``cadence``."""
    if step <= 0 or step % cadence:
        return None
    cells = np.asarray(incident_cells, dtype=int)
    rho = np.asarray(truth, dtype=float)[cells]
    true_speed = speeds(rho, params.v_max[cells], params.rho_cr[cells], params.rho_j[cells])
    rng = substream(seed, PROBE_EMIT, step)
    vals = np.maximum(true_speed + noise_std * rng.standard_normal(cells.size), 0.0)
    return SpeedObs(cells, vals, noise_std)


def emit_drone_obs(truth, true_vmax, drone: DroneState, geom: CorridorGeometry,
                   density_std, vmax_std, seed, step, rho_j=300.0):
    """Accurate densities over the view window and direct free-flow speeds at incident cells."""
    truth = np.asarray(truth, dtype=float)
    cells = drone.viewed(geom.num_cells)
    rng = substream(seed, DRONE_EMIT, step)
    vals = truth[cells] + density_std * rng.standard_normal(cells.size)
    dens = DensityObs(cells, np.clip(vals, 0.0, rho_j), density_std)
    seen = [c for c in cells if c in geom.incident_cells]
    if not seen:
        return dens, None
    idx = [geom.incident_cells.index(c) for c in seen]
    v = np.asarray(true_vmax, dtype=float)[idx] + vmax_std * rng.standard_normal(len(seen))
    return dens, VmaxObs(seen, np.maximum(v, 0.0), vmax_std)
