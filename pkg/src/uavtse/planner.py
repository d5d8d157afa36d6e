"""One-step-lookahead drone routing that minimises weighted covariance traces.

Each tick, every candidate path is simulated to its horizon on a clone of the
live filter, with predicted observations standing in for future data. The
drone then moves one cell along the path with the lowest score.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .ctm import CorridorGeometry
from .dual import DensityObs, DualEstimator, DualFilterState, SensorFeed, SpeedObs, VmaxObs
from .scenario import DroneState

log = logging.getLogger(__name__)

UPSTREAM = "upstream"
DOWNSTREAM = "downstream"
_STEP = {UPSTREAM: -1, DOWNSTREAM: 1}
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class CandidatePath:
    direction: str
    horizon: int
    cells: tuple  # cells[k-1] is the drone cell k steps ahead

    def __post_init__(self):
        if self.horizon < 1 or len(self.cells) != self.horizon:
            raise ValueError("path needs horizon >= 1 and one cell per step")

    def cell_at_step(self, k: int) -> int:
        return self.cells[k - 1]


@dataclass(frozen=True)
class UncertaintyScore:
    J_vmax: float
    J_rho: float
    lam: float
    K: int
    V: int

    @property
    def J(self) -> float:
        return self.lam / self.V * self.J_vmax + (1.0 - self.lam) / self.K * self.J_rho


@dataclass(frozen=True)
class SensorModel:
    """Sensor noise and cadences the planner assumes for simulated data."""

    loop_std: float = 10.0
    probe_std: float = 5.0
    drone_density_std: float = 1.0
    drone_vmax_std: float = 2.0
    loop_cadence: int = 1
    probe_cadence: int = 30


def lookahead_horizon(direction: str, drone: DroneState, geom: CorridorGeometry) -> int:
    """Steps until the drone reaches node 1 (upstream) or node 4 (downstream)."""
    if direction == UPSTREAM:
        return drone.cell - geom.node_positions.get(1, 0)
    if direction == DOWNSTREAM:
        return geom.node_positions.get(4, geom.num_cells - 1) - drone.cell
    raise ValueError(f"unknown direction {direction!r}")


def enumerate_paths(drone: DroneState, geom: CorridorGeometry) -> list:
    paths = []
    for direction in (UPSTREAM, DOWNSTREAM):
        h = lookahead_horizon(direction, drone, geom)
        if h < 1:
            continue
        step = _STEP[direction]
        paths.append(CandidatePath(direction, h, tuple(drone.cell + step * k for k in range(1, h + 1))))
    return paths


def score_path(path: CandidatePath, snapshot: DualFilterState, estimator: DualEstimator,
               lam: float, sensors: SensorModel, drone: DroneState, stream: int | None = None
               ) -> UncertaintyScore:
    """Run the dual filter ``path.horizon`` steps ahead on a clone and score the result.

    Loop, probe and drone data are replaced by predictions from the current
    ensemble means, so only the covariances carry information.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    geom = estimator.geometry
    # one substream per planning tick, shared by all paths (common random numbers)
    stream = 1 + snapshot.clock if stream is None else stream
    state = snapshot.copy()
    for k in range(1, path.horizon + 1):
        state.clock += 1
        state = estimator.propagate_densities(state, stream)
        mean = state.density_mean
        parts = []
        if state.clock % sensors.loop_cadence == 0:
            parts.append(DensityObs(np.arange(geom.num_cells), mean, sensors.loop_std))
        here = DroneState(path.cell_at_step(k), path.direction, drone.view_cells)
        viewed = here.viewed(geom.num_cells)
        parts.append(DensityObs(viewed, mean[viewed], sensors.drone_density_std))
        state = estimator.update_densities(state, DensityObs.concat(*parts), stream)

        probe = None
        if state.clock % sensors.probe_cadence == 0:
            cells = np.array(geom.incident_cells)
            pred = estimator.predicted_speeds(state.vmax_mean, state.density_mean)
            probe = SpeedObs(cells, pred, sensors.probe_std)
        seen = [c for c in viewed if c in geom.incident_cells]
        drone_v = None
        if seen:
            vbar = state.vmax_mean
            drone_v = VmaxObs(seen, [vbar[geom.incident_cells.index(c)] for c in seen],
                              sensors.drone_vmax_std)
        feed = SensorFeed(probe=probe, drone_vmax=drone_v)
        if feed.has_speed_info:
            state = estimator.assimilate_speeds(state, probe, drone_v, state.density_mean, stream)
            state = estimator.writeback_parameters(state)
    _, j_rho = state.density_covariance()
    _, j_v = state.vmax_covariance()
    return UncertaintyScore(j_v, j_rho, lam, estimator.K, max(estimator.V, 1))


def choose_and_move(drone: DroneState, scores: list, geom: CorridorGeometry | None = None
                    ) -> DroneState:
    """Move one cell along the lowest-scoring path.

    Near-ties (relative 1e-12) keep the current heading, then prefer upstream.
    """
    if not scores:
        raise ValueError("no scored paths to choose from")
    best = min(s.J for _, s in scores)
    tol = TIE_RTOL * max(abs(best), 1e-300)
    tied = [p for p, s in scores if s.J - best <= tol]
    if len(tied) == 1:
        path = tied[0]
    else:
        by_dir = {p.direction: p for p in tied}
        path = by_dir.get(drone.heading) or by_dir.get(UPSTREAM) or tied[0]
    cell = drone.cell + _STEP[path.direction]
    if geom is not None:
        cell = min(max(cell, 0), geom.num_cells - 1)
    return DroneState(cell, path.direction, drone.view_cells)


def plan_step(drone: DroneState, snapshot: DualFilterState, estimator: DualEstimator,
              lam: float, sensors: SensorModel):
    """Score every candidate path and move; returns ``(new_drone, scores)``."""
    scored = []
    for path in enumerate_paths(drone, estimator.geometry):
        try:
            scored.append((path, score_path(path, snapshot, estimator, lam, sensors, drone)))
        except (ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
            log.warning("skipping %s path: %s", path.direction, exc)
    if not scored:
        return drone, scored
    return choose_and_move(drone, scored, estimator.geometry), scored
