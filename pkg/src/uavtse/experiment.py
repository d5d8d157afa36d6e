"""Seeded twin experiments: truth, sensors, dual filter and optional drone.

A run produces a set of CSV files that fully describe it. Truth and
loop/probe data depend only on the seed, so a baseline and a drone run with
the same seed see exactly the same ground truth and fixed-sensor readings.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctm import FundamentalDiagram, updated_critical_density
from .dual import DualEstimator, EstimatorConfig, SensorFeed
from .planner import SensorModel, plan_step
from .scenario import (
    DroneState,
    Incident,
    ScenarioConfig,
    TruthTrace,
    emit_drone_obs,
    emit_loop_obs,
    emit_probe_speed_obs,
    generate_truth,
)

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

log = logging.getLogger(__name__)

MODES = ("baseline", "drone")
BAND = 3.0  # km/h, convergence tolerance around the true free-flow speed
HOLD = 30  # steps the mean must stay inside the band
SEGMENTS = (("lt5", None, 4), ("5to10", 5, 10), ("11to15", 11, 15), ("gt15", 16, None))


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    mode: str = "baseline"
    lam: float = 0.5
    horizon_steps: int = 360
    seed: int = 0
    out_dir: str | None = None  # when set, run_experiment writes CSVs and SVGs here

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam: must lie in [0, 1], got {self.lam}")
        if self.horizon_steps < 1:
            raise ConfigError("horizon_steps: must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed: must be non-negative")

    def sensor_model(self) -> SensorModel:
        sc = self.scenario
        return SensorModel(sc.loop_std, sc.probe_std, sc.drone_density_std, sc.drone_vmax_std,
                           sc.loop_cadence, sc.probe_cadence)


@dataclass
class EstimateTrace:
    """Filter output per step; row 0 is the prior."""

    density_mean: np.ndarray  # (T+1, K)
    density_std: np.ndarray
    vmax_mean: np.ndarray  # (T+1, V)
    vmax_std: np.ndarray
    trace_density: np.ndarray  # (T+1,)
    trace_vmax: np.ndarray
    J: np.ndarray  # planner score of the chosen path; nan when no plan was made
    speed_update: np.ndarray  # 1 where the speed filter assimilated data that step

    @property
    def speed_events(self) -> list:
        return [int(t) for t in np.flatnonzero(self.speed_update)]


@dataclass
class DroneTrace:
    cells: np.ndarray  # (T+1,), cell observed at each step; row 0 is the start
    headings: list


@dataclass
class RunResult:
    config: RunConfig
    truth: TruthTrace
    estimates: EstimateTrace
    drone: DroneTrace | None
    metrics: dict


def _record(state):
    dstd = np.sqrt(np.maximum(state.density_ens.var(axis=1, ddof=1), 0.0))
    vstd = np.sqrt(np.maximum(state.vmax_ens.var(axis=1, ddof=1), 0.0))
    return (state.density_mean, dstd, state.vmax_mean, vstd,
            state.density_covariance()[1], state.vmax_covariance()[1])


def run_experiment(cfg: RunConfig) -> RunResult:
    sc = cfg.scenario
    geom = sc.geometry
    T = cfg.horizon_steps
    seed = cfg.seed
    log.info("%s run, seed %d, %d steps", cfg.mode, seed, T)
    truth = generate_truth(sc, T)
    est = DualEstimator(geom, sc.fd0, sc.boundary, cfg.estimator, sc.capacity_clamp)
    state = est.initial_state(seed)
    sensors = cfg.sensor_model()

    rows = [_record(state)]
    J = np.full(T + 1, np.nan)
    events = np.zeros(T + 1, dtype=int)
    drone = None
    cells, headings = [], []
    if cfg.mode == "drone":
        drone = DroneState(sc.drone_start_cell, "upstream", sc.drone_view_cells)
        cells.append(drone.cell)
        headings.append(drone.heading)

    for t in range(1, T + 1):
        rho = truth.density[t]
        loop = emit_loop_obs(rho, sc.loop_std, seed, t, sc.fd0.rho_j) if t % sc.loop_cadence == 0 else None
        probe = emit_probe_speed_obs(rho, sc.true_parameters(t), geom.incident_cells,
                                     sc.probe_cadence, t, sc.probe_std, seed)
        d_rho = d_v = None
        if drone is not None:
            d_rho, d_v = emit_drone_obs(rho, truth.vmax[t], drone, geom, sc.drone_density_std,
                                        sc.drone_vmax_std, seed, t, sc.fd0.rho_j)
            cells.append(drone.cell)
            headings.append(drone.heading)
        feed = SensorFeed(loop, probe, d_rho, d_v)
        if feed.has_speed_info:
            events[t] = 1
        state = est.run_step(state, feed)
        rows.append(_record(state))
        if drone is not None and t >= sc.drone_launch_step:
            moved, scores = plan_step(drone, state, est, cfg.lam, sensors)
            chosen = [s for p, s in scores if p.direction == moved.heading]
            if chosen:
                J[t] = chosen[0].J
            drone = moved

    cols = list(zip(*rows))
    estimates = EstimateTrace(
        np.array(cols[0]), np.array(cols[1]), np.array(cols[2]), np.array(cols[3]),
        np.array(cols[4], dtype=float), np.array(cols[5], dtype=float), J, events,
    )
    dtrace = DroneTrace(np.array(cells, dtype=int), headings) if drone is not None else None
    result = RunResult(cfg, truth, estimates, dtrace, compute_metrics(truth, estimates, dtrace))
    if cfg.out_dir is not None:
        from .plotting import plot_run

        log.info("writing outputs to %s", cfg.out_dir)
        plot_run(write_run(result, cfg.out_dir))
    return result


def convergence_step(mean, target, band=BAND, hold=HOLD):
    """First step from which ``mean`` stays within ``band`` of ``target`` for ``hold`` steps.

    Returns None when it never does. A run that ends inside the band with
    fewer than ``hold`` steps left does not count as converged.
    """
    inside = np.abs(np.asarray(mean, float) - np.asarray(target, float)) <= band
    run = 0
    for t in range(inside.size - 1, -1, -1):
        run = run + 1 if inside[t] else 0
        inside[t] = run >= hold
    hits = np.flatnonzero(inside)
    return int(hits[0]) if hits.size else None


def dwell_fractions(cells) -> dict:
    """Share of steps spent in each corridor segment."""
    cells = np.asarray(cells, dtype=int)
    if cells.size == 0:
        raise ValueError("empty drone trajectory")
    out = {}
    for name, lo, hi in SEGMENTS:
        mask = np.ones(cells.size, dtype=bool)
        if lo is not None:
            mask &= cells >= lo
        if hi is not None:
            mask &= cells <= hi
        out[name] = float(mask.mean())
    return out


def rmse_by_step(truth: TruthTrace, estimates: EstimateTrace) -> np.ndarray:
    """Density RMSE across cells at each step."""
    return np.sqrt(np.mean((estimates.density_mean - truth.density) ** 2, axis=1))


def compute_metrics(truth: TruthTrace, estimates: EstimateTrace, drone: DroneTrace | None = None
                    ) -> dict:
    """Scalar summaries of a run, keyed by metric name."""
    T1 = truth.density.shape[0]
    if estimates.density_mean.shape != truth.density.shape:
        raise ValueError(f"density traces misaligned: truth {truth.density.shape}, "
                         f"estimate {estimates.density_mean.shape}")
    if estimates.vmax_mean.shape != truth.vmax.shape:
        raise ValueError("free-flow speed traces misaligned")
    if drone is not None and drone.cells.shape[0] != T1:
        raise ValueError(f"drone trace has {drone.cells.shape[0]} steps, expected {T1}")

    err = estimates.density_mean[1:] - truth.density[1:]
    m = {"rmse_density": float(np.sqrt(np.mean(err ** 2)))}
    for c in range(err.shape[1]):
        m[f"rmse_density_cell_{c}"] = float(np.sqrt(np.mean(err[:, c] ** 2)))
    for i, c in enumerate(truth.incident_cells):
        conv = convergence_step(estimates.vmax_mean[:, i], truth.vmax[:, i])
        m[f"vmax_convergence_step_cell_{c}"] = float("nan") if conv is None else float(conv)
        m[f"vmax_final_mean_cell_{c}"] = float(estimates.vmax_mean[-1, i])
        m[f"vmax_final_std_cell_{c}"] = float(estimates.vmax_std[-1, i])
        m[f"vmax_initial_std_cell_{c}"] = float(estimates.vmax_std[0, i])
    if drone is not None:
        for name, frac in dwell_fractions(drone.cells[1:]).items():
            m[f"dwell_{name}"] = frac
    m["speed_events"] = float(np.sum(estimates.speed_update))
    return m


def congested_rmse(truth: TruthTrace, estimates: EstimateTrace, cell: int,
                   fd0: FundamentalDiagram, v_incident: float) -> tuple:
    """Density RMSE at ``cell`` over steps where the truth sits in the incident's congested branch.

    Returns ``(rmse, steps)``; ``rmse`` is nan when no step is congested.
    """
    lo = updated_critical_density(v_incident, fd0)
    rho = truth.density[1:, cell]
    mask = rho >= lo
    if not mask.any():
        return float("nan"), 0
    err = estimates.density_mean[1:, cell][mask] - rho[mask]
    return float(np.sqrt(np.mean(err ** 2))), int(mask.sum())


# ---------------------------------------------------------------- CSV output

CSV_FILES = {
    "truth.csv": ("step", "cell", "density"),
    "truth_vmax.csv": ("step", "incident_cell", "v_max"),
    "estimates.csv": ("step", "kind", "location", "mean", "std"),
    "covtrace.csv": ("step", "trace_density", "trace_vmax", "J", "speed_update", "rmse_density"),
    "drone.csv": ("step", "cell", "heading"),
    "metrics.csv": ("metric", "value"),
}


def _f(x) -> str:
    # repr round-trips exactly through float()
    return repr(float(x))


def _write(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_run(result: RunResult, out_dir) -> Path:
    """Write the run's CSV files into ``out_dir`` and return it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr, es = result.truth, result.estimates
    T1, K = tr.density.shape
    inc = tr.incident_cells

    _write(out / "truth.csv", CSV_FILES["truth.csv"],
           ((t, c, _f(tr.density[t, c])) for t in range(T1) for c in range(K)))
    _write(out / "truth_vmax.csv", CSV_FILES["truth_vmax.csv"],
           ((t, c, _f(tr.vmax[t, i])) for t in range(T1) for i, c in enumerate(inc)))

    def est_rows():
        for t in range(T1):
            for c in range(K):
                yield t, "density", c, _f(es.density_mean[t, c]), _f(es.density_std[t, c])
            for i, c in enumerate(inc):
                yield t, "vmax", c, _f(es.vmax_mean[t, i]), _f(es.vmax_std[t, i])

    _write(out / "estimates.csv", CSV_FILES["estimates.csv"], est_rows())
    rmse = rmse_by_step(tr, es)
    _write(out / "covtrace.csv", CSV_FILES["covtrace.csv"],
           ((t, _f(es.trace_density[t]), _f(es.trace_vmax[t]), _f(es.J[t]), int(es.speed_update[t]),
             _f(rmse[t])) for t in range(T1)))
    if result.drone is not None:
        _write(out / "drone.csv", CSV_FILES["drone.csv"],
               ((t, int(c), h) for t, (c, h) in enumerate(zip(result.drone.cells, result.drone.headings))))
    _write(out / "metrics.csv", CSV_FILES["metrics.csv"],
           ((k, _f(v)) for k, v in result.metrics.items()))
    return out


def read_csv(path) -> list:
    """Rows of a run CSV as dicts; numeric fields converted to int or float."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k, v in row.items():
            if k in ("kind", "heading", "metric"):
                continue
            row[k] = int(v) if k in ("step", "cell", "location", "incident_cell", "speed_update") else float(v)
    return rows


def load_run(run_dir) -> dict:
    """Read a run directory back into arrays keyed like the result fields."""
    d = Path(run_dir)
    truth = read_csv(d / "truth.csv")
    T1 = max(r["step"] for r in truth) + 1
    K = max(r["cell"] for r in truth) + 1
    out = {"truth_density": np.array([r["density"] for r in truth]).reshape(T1, K)}
    tv = read_csv(d / "truth_vmax.csv")
    inc = sorted({r["incident_cell"] for r in tv})
    out["incident_cells"] = tuple(inc)
    out["truth_vmax"] = np.array([r["v_max"] for r in tv]).reshape(T1, len(inc))
    est = read_csv(d / "estimates.csv")
    dens = [r for r in est if r["kind"] == "density"]
    vm = [r for r in est if r["kind"] == "vmax"]
    out["density_mean"] = np.array([r["mean"] for r in dens]).reshape(T1, K)
    out["density_std"] = np.array([r["std"] for r in dens]).reshape(T1, K)
    out["vmax_mean"] = np.array([r["mean"] for r in vm]).reshape(T1, len(inc))
    out["vmax_std"] = np.array([r["std"] for r in vm]).reshape(T1, len(inc))
    cov = read_csv(d / "covtrace.csv")
    out["trace_density"] = np.array([r["trace_density"] for r in cov])
    out["trace_vmax"] = np.array([r["trace_vmax"] for r in cov])
    out["J"] = np.array([r["J"] for r in cov])
    out["speed_update"] = np.array([r["speed_update"] for r in cov], dtype=int)
    out["rmse_density"] = np.array([r["rmse_density"] for r in cov])
    if (d / "drone.csv").exists():
        dr = read_csv(d / "drone.csv")
        out["drone_cells"] = np.array([r["cell"] for r in dr], dtype=int)
        out["drone_headings"] = [r["heading"] for r in dr]
    out["metrics"] = {r["metric"]: r["value"] for r in read_csv(d / "metrics.csv")}
    return out


def metrics_from_run(run_dir) -> dict:
    """Recompute a run's metrics from its CSV files alone."""
    run = load_run(run_dir)
    truth = TruthTrace(run["truth_density"], run["truth_vmax"], np.empty((0, 3)), run["incident_cells"])
    est = EstimateTrace(run["density_mean"], run["density_std"], run["vmax_mean"], run["vmax_std"],
                        run["trace_density"], run["trace_vmax"], run["J"], run["speed_update"])
    drone = None
    if "drone_cells" in run:
        drone = DroneTrace(run["drone_cells"], run["drone_headings"])
    return compute_metrics(truth, est, drone)


# ------------------------------------------------------------- TOML config

_SECTIONS = ("run", "scenario", "estimator")
_RUN_KEYS = ("mode", "lam", "horizon_steps", "seed", "out_dir")
_SCENARIO_SKIP = {"geometry", "fd0", "incidents"}


def _line_of(text: str, section: str, key: str):
    """Best-effort 1-based line number of ``key`` inside ``[section]``."""
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        hdr = re.match(r"^\[+\s*([^\]]+?)\s*\]+", s)
        if hdr:
            current = hdr.group(1)
            continue
        if re.match(rf"^{re.escape(key)}\s*=", s) and (current == section or current is None):
            return i
    return None


def _where(text, section, key):
    line = _line_of(text, section, key)
    return f"{section}.{key}" + (f" (line {line})" if line else "")


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    return value


def _build(cls, table, text, section, skip=()):
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    kwargs = {}
    for key, value in table.items():
        if key not in names:
            raise ConfigError(f"{_where(text, section, key)}: unknown field")
        kwargs[key] = _coerce(value, getattr(defaults, key), _where(text, section, key))
    return kwargs


def config_from_text(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    for sec in doc:
        if sec not in _SECTIONS:
            raise ConfigError(f"[{sec}]: unknown section")

    run = doc.get("run", {})
    run_kwargs = {}
    for key, value in run.items():
        if key not in _RUN_KEYS:
            raise ConfigError(f"{_where(text, 'run', key)}: unknown field")
        if key == "out_dir":
            if not isinstance(value, str):
                raise ConfigError(f"{_where(text, 'run', key)}: expected a path string")
            run_kwargs[key] = value
            continue
        run_kwargs[key] = _coerce(value, getattr(RunConfig, key), _where(text, "run", key))

    sc_table = dict(doc.get("scenario", {}))
    incidents = sc_table.pop("incidents", None)
    sc_kwargs = _build(ScenarioConfig, sc_table, text, "scenario", _SCENARIO_SKIP)
    if incidents is not None:
        where = _where(text, "scenario", "incidents")
        try:
            sc_kwargs["incidents"] = tuple(
                Incident(int(d["cell"]), float(d["v_max"]), d.get("start_step"), d.get("end_step"))
                for d in incidents)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{where}: each incident needs cell and v_max ({exc})") from exc
    try:
        scenario = ScenarioConfig(**sc_kwargs)
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from exc

    est_kwargs = _build(EstimatorConfig, doc.get("estimator", {}), text, "estimator")
    try:
        estimator = EstimatorConfig(**est_kwargs)
    except ValueError as exc:
        raise ConfigError(f"estimator: {exc}") from exc

    return RunConfig(scenario=scenario, estimator=estimator, **run_kwargs)


def load_config(path) -> RunConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))


def summary_row(seed: int, mode: str, metrics: dict) -> dict:
    row = {"seed": seed, "mode": mode}
    row.update({k: v for k, v in metrics.items() if not k.startswith("rmse_density_cell")})
    return row
