"""Dual EnKF: one filter for cell densities, one for incident free-flow speeds.

The two filters keep separate covariances and exchange only means: the
density mean feeds the speed filter's observation operator, and the speed
mean is written back into the forward CTM.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import enkf
from .ctm import (
    BoundaryConditions,
    CellParameters,
    CorridorGeometry,
    FundamentalDiagram,
    ctm_step_counts,
    speeds,
    updated_critical_density,
)
from .rng import (
    DENSITY_PERTURB,
    INIT_DENSITY,
    INIT_VMAX,
    MODEL_NOISE,
    SPEED_PERTURB,
    VMAX_WALK,
    substream,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorConfig:
    n_members: int = 100
    density_model_std: float = 2.0  # veh/km per cell per step
    loop_std: float = 10.0  # veh/km
    probe_std: float = 5.0  # km/h
    vmax_walk_std: float = 1.0  # km/h per speed assimilation
    drone_density_std: float = 1.0
    drone_vmax_std: float = 2.0
    prior_density_mean: float = 30.0
    prior_density_std: float = 15.0
    vmax_prior_low: float = 15.0
    vmax_prior_high: float = 90.0
    vmax_floor: float = 1.0  # lower clamp for speed members, km/h

    def __post_init__(self):
        if self.n_members < 2:
            raise ValueError("ensemble size must be at least 2")
        if not 0 < self.vmax_prior_low <= self.vmax_prior_high:
            raise ValueError("bad free-flow speed prior bounds")


@dataclass
class DensityObs:
    cells: np.ndarray
    values: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        self.std = np.broadcast_to(np.asarray(self.std, dtype=float), self.values.shape).copy()
        if not (self.cells.shape == self.values.shape):
            raise ValueError("cells and values must align")

    @classmethod
    def concat(cls, *parts):
        parts = [p for p in parts if p is not None and p.cells.size]
        if not parts:
            return None
        return cls(np.concatenate([p.cells for p in parts]),
                   np.concatenate([p.values for p in parts]),
                   np.concatenate([p.std for p in parts]))


# same layout; cells are corridor cell indices of incident locations
SpeedObs = DensityObs
VmaxObs = DensityObs


@dataclass
class SensorFeed:
    loop: DensityObs | None = None
    probe: SpeedObs | None = None
    drone_density: DensityObs | None = None
    drone_vmax: VmaxObs | None = None

    @property
    def has_speed_info(self) -> bool:
        return any(o is not None and o.cells.size for o in (self.probe, self.drone_vmax))


@dataclass
class DualFilterState:
    density_ens: np.ndarray  # (K, N) veh/km
    vmax_ens: np.ndarray  # (V, N) km/h, rows follow geometry.incident_cells
    active: CellParameters
    clock: int = 0
    speed_updates: int = 0
    clamp_events: int = 0
    member_updates: int = 0
    seed: int = 0

    def copy(self) -> "DualFilterState":
        return DualFilterState(
            self.density_ens.copy(), self.vmax_ens.copy(), self.active.copy(),
            self.clock, self.speed_updates, self.clamp_events, self.member_updates, self.seed,
        )

    @property
    def density_mean(self) -> np.ndarray:
        return self.density_ens.mean(axis=1)

    @property
    def vmax_mean(self) -> np.ndarray:
        return self.vmax_ens.mean(axis=1)

    def density_covariance(self):
        return enkf.covariance_and_trace(self.density_ens)

    def vmax_covariance(self):
        return enkf.covariance_and_trace(self.vmax_ens)

    @property
    def clamp_fraction(self) -> float:
        return self.clamp_events / self.member_updates if self.member_updates else 0.0


@dataclass
class DualEstimator:
    """Static context of the filter: corridor, baseline diagram, boundary and noise."""

    geometry: CorridorGeometry
    fd0: FundamentalDiagram
    boundary: BoundaryConditions
    config: EstimatorConfig = field(default_factory=EstimatorConfig)
    capacity_clamp: bool = False

    @property
    def incident_cells(self) -> tuple:
        return self.geometry.incident_cells

    @property
    def K(self) -> int:
        return self.geometry.num_cells

    @property
    def V(self) -> int:
        return len(self.geometry.incident_cells)

    def initial_state(self, seed: int = 0) -> DualFilterState:
        cfg = self.config
        N = cfg.n_members
        rng = substream(seed, INIT_DENSITY)
        rho = cfg.prior_density_mean + cfg.prior_density_std * rng.standard_normal((self.K, N))
        rho = np.clip(rho, 0.0, self.fd0.rho_j)
        rng = substream(seed, INIT_VMAX)
        v = rng.uniform(cfg.vmax_prior_low, cfg.vmax_prior_high, size=(self.V, N))
        # the forward model starts from the incident-free calibration
        active = CellParameters.uniform(self.fd0, self.K)
        return DualFilterState(rho, v, active, clock=0, seed=int(seed))

    def forward(self, rho_ens, active: CellParameters):
        """Deterministic CTM step applied to every member."""
        dx = self.geometry.dx
        n, _ = ctm_step_counts(rho_ens * dx, active, self.boundary, self.geometry, self.capacity_clamp)
        return n / dx

    def _clamp(self, state, arr, lo, hi):
        bad = (arr < lo) | (arr > hi)
        state.clamp_events += int(bad.sum())
        state.member_updates += arr.size
        return np.clip(arr, lo, hi)

    def propagate_densities(self, state: DualFilterState, stream: int = 0) -> DualFilterState:
        """Forecast step: CTM with the active parameters plus model noise."""
        out = state.copy()
        rng = substream(out.seed, MODEL_NOISE, out.clock, stream)
        A = enkf.propagate(out.density_ens, lambda E: self.forward(E, out.active),
                           self.config.density_model_std, rng, vectorized=True)
        out.density_ens = np.clip(A, 0.0, out.active.rho_j[:, None])
        return out

    def update_densities(self, state: DualFilterState, obs: DensityObs | None,
                         stream: int = 0) -> DualFilterState:
        """Analysis step with a row-selector observation operator."""
        if obs is None or not obs.cells.size:
            return state
        if obs.cells.min() < 0 or obs.cells.max() >= self.K:
            raise ValueError("observation cell outside corridor")
        out = state.copy()
        A = out.density_ens
        rng = substream(out.seed, DENSITY_PERTURB, out.clock, stream)
        D, ups = enkf.perturb_observations(obs.values, obs.std, A.shape[1], rng)
        H = enkf.selector(obs.cells, self.K)
        A = enkf.analysis_linear(A, D, ups, H).posterior
        out.density_ens = self._clamp(out, A, 0.0, out.active.rho_j[:, None])
        return out

    def assimilate_densities(self, state: DualFilterState, obs: DensityObs | None,
                             stream: int = 0) -> DualFilterState:
        """Propagate the density ensemble one step and update it with ``obs``."""
        return self.update_densities(self.propagate_densities(state, stream), obs, stream)

    def predicted_speeds(self, vmax_members, density_mean):
        """Speed each member's incident diagram predicts at the given densities."""
        v = np.asarray(vmax_members, dtype=float)
        rho = np.asarray(density_mean, dtype=float)[list(self.incident_cells)]
        if v.ndim == 2:
            rho = rho[:, None]
        rho_cr = updated_critical_density(v, self.fd0)
        return speeds(np.clip(rho, 0.0, self.fd0.rho_j), v, rho_cr, self.fd0.rho_j)

    def build_diagnostic_matrix(self, state: DualFilterState, density_mean) -> np.ndarray:
        """Predicted speeds at incident cells, one column per speed member."""
        return self._diagnostic(state.vmax_ens, density_mean)

    def _diagnostic(self, vmax_ens, density_mean):
        A_hat = self.predicted_speeds(vmax_ens, density_mean)
        order = np.argsort(vmax_ens, axis=1)
        sorted_pred = np.take_along_axis(A_hat, order, axis=1)
        if np.any(np.diff(sorted_pred, axis=1) < -1e-9):
            raise RuntimeError("predicted speed is not monotone in free-flow speed")
        return A_hat

    def assimilate_speeds(self, state: DualFilterState, probe: SpeedObs | None = None,
                          drone_vmax: VmaxObs | None = None, density_mean=None,
                          stream: int = 0) -> DualFilterState:
        """Random-walk the speed ensemble, then update it with probe and drone data.

        Probe speeds enter through the diagnostic matrix; drone readings
        observe the free-flow speed directly.
        """
        out = state.copy()
        if density_mean is None:
            density_mean = out.density_mean
        key = (out.clock, stream)
        rng = substream(out.seed, VMAX_WALK, *key)
        A = enkf.propagate(out.vmax_ens, lambda E: E, self.config.vmax_walk_std, rng, vectorized=True)
        A = np.clip(A, self.config.vmax_floor, self.fd0.v_max)

        row_of = {c: i for i, c in enumerate(self.incident_cells)}
        preds, vals, stds = [], [], []
        if probe is not None and probe.cells.size:
            full = self._diagnostic(A, density_mean)
            for c, val, s in zip(probe.cells, probe.values, probe.std):
                preds.append(full[row_of[int(c)]])
                vals.append(val)
                stds.append(s)
        if drone_vmax is not None and drone_vmax.cells.size:
            for c, val, s in zip(drone_vmax.cells, drone_vmax.values, drone_vmax.std):
                preds.append(A[row_of[int(c)]])
                vals.append(val)
                stds.append(s)
        if preds:
            rng = substream(out.seed, SPEED_PERTURB, *key)
            D, ups = enkf.perturb_observations(np.array(vals), np.array(stds), A.shape[1], rng)
            A = enkf.analysis_nonlinear(A, np.vstack(preds), D, ups).posterior
            A = self._clamp(out, A, self.config.vmax_floor, self.fd0.v_max)
            out.speed_updates += 1
        out.vmax_ens = A
        return out

    def writeback_parameters(self, state: DualFilterState) -> DualFilterState:
        """Install the mean free-flow speeds, and matching critical densities, into the CTM."""
        out = state.copy()
        means = out.vmax_ens.mean(axis=1)
        for c, v in zip(self.incident_cells, means):
            out.active.v_max[c] = v
            out.active.rho_cr[c] = updated_critical_density(v, self.fd0)
        return out

    def run_step(self, state: DualFilterState, feed: SensorFeed, stream: int = 0) -> DualFilterState:
        """Advance the dual filter by one time step and assimilate ``feed``."""
        out = state.copy()
        out.clock += 1
        dens = DensityObs.concat(feed.loop, feed.drone_density)
        out = self.assimilate_densities(out, dens, stream)
        if feed.has_speed_info:
            out = self.assimilate_speeds(out, feed.probe, feed.drone_vmax, out.density_mean, stream)
            out = self.writeback_parameters(out)
        return out
