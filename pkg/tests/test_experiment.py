import dataclasses
import math

import numpy as np
import pytest

from uavtse.experiment import (
    CSV_FILES,
    ConfigError,
    DroneTrace,
    EstimateTrace,
    RunConfig,
    compute_metrics,
    config_from_text,
    convergence_step,
    dwell_fractions,
    load_run,
    metrics_from_run,
    rmse_by_step,
    run_experiment,
    write_run,
)
from uavtse.scenario import TruthTrace


@pytest.fixture(scope="module")
def short_runs():
    base = RunConfig(horizon_steps=40, seed=3)
    return run_experiment(base), run_experiment(dataclasses.replace(base, mode="drone"))


class TestConvergence:
    def test_enters_and_holds(self):
        mean = np.r_[np.full(5, 30.0), np.full(40, 21.0)]
        assert convergence_step(mean, np.full(45, 20.0)) == 5

    def test_excursion_restarts_hold(self):
        mean = np.r_[np.full(5, 30.0), np.full(10, 21.0), [25.0], np.full(35, 19.0)]
        assert convergence_step(mean, 20.0) == 16

    def test_never(self):
        assert convergence_step(np.full(50, 30.0), 20.0) is None
        # inside the band but for too few steps at the end of the run
        assert convergence_step(np.r_[np.full(30, 30.0), np.full(10, 20.0)], 20.0) is None

    def test_band_edge_counts(self):
        assert convergence_step(np.full(30, 23.0), 20.0) == 0


class TestDwell:
    def test_segments(self):
        cells = [0, 4, 5, 10, 11, 15, 16, 19]
        out = dwell_fractions(cells)
        assert out == {"lt5": 0.25, "5to10": 0.25, "11to15": 0.25, "gt15": 0.25}

    def test_sum_to_one(self):
        cells = np.random.default_rng(0).integers(0, 20, 97)
        assert sum(dwell_fractions(cells).values()) == pytest.approx(1.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            dwell_fractions([])


def hand_trace():
    """Three steps, two cells, one incident cell."""
    truth = TruthTrace(np.array([[10.0, 20.0], [12.0, 22.0], [14.0, 24.0]]),
                       np.array([[20.0], [20.0], [20.0]]), np.zeros((2, 3)), (1,))
    return truth


def estimates_for(density, vmax):
    T1 = density.shape[0]
    z = np.zeros(T1)
    return EstimateTrace(density, np.ones_like(density), vmax, np.ones_like(vmax), z, z,
                         np.full(T1, np.nan), np.zeros(T1, dtype=int))


class TestMetricsOracle:
    def test_exact_estimate(self):
        tr = hand_trace()
        m = compute_metrics(tr, estimates_for(tr.density.copy(), tr.vmax.copy()))
        assert m["rmse_density"] == 0.0

    def test_constant_offset(self):
        tr = hand_trace()
        m = compute_metrics(tr, estimates_for(tr.density + 10.0, tr.vmax))
        assert m["rmse_density"] == pytest.approx(10.0)
        np.testing.assert_allclose(rmse_by_step(tr, estimates_for(tr.density + 10.0, tr.vmax)), 10.0)

    def test_hand_built(self):
        tr = hand_trace()
        est = np.array([[0.0, 0.0], [15.0, 22.0], [14.0, 20.0]])
        m = compute_metrics(tr, estimates_for(est, np.array([[50.0], [21.0], [19.0]])),
                            DroneTrace(np.array([10, 4, 5]), ["upstream"] * 3))
        # step 0 is the prior and is excluded: errors (3, 0, 0, -4) -> sqrt(25 / 4)
        assert m["rmse_density"] == pytest.approx(2.5)
        assert m["rmse_density_cell_0"] == pytest.approx(np.sqrt(9 / 2))
        assert m["rmse_density_cell_1"] == pytest.approx(np.sqrt(16 / 2))
        assert m["dwell_lt5"] == 0.5 and m["dwell_5to10"] == 0.5
        # the run is far shorter than the 30-step hold, so no convergence is declared
        assert np.isnan(m["vmax_convergence_step_cell_1"])
        assert m["vmax_final_mean_cell_1"] == 19.0


class TestRun:
    def test_paired_truth(self, short_runs):
        base, drone = short_runs
        np.testing.assert_array_equal(base.truth.density, drone.truth.density)
        assert base.drone is None
        assert drone.drone.cells.shape == (41,)

    def test_drone_hovers_until_launch(self, short_runs):
        _, drone = short_runs
        launch = drone.config.scenario.drone_launch_step
        # the cell observed at step t is the position after the move made at t - 1
        assert np.all(drone.drone.cells[: launch + 1] == 10)
        assert drone.drone.cells[launch + 1] != 10
        assert np.all(np.abs(np.diff(drone.drone.cells)) <= 1)
        assert np.isnan(drone.estimates.J[: launch]).all()
        assert not np.isnan(drone.estimates.J[launch:]).any()

    def test_metrics(self, short_runs):
        base, drone = short_runs
        assert "dwell_5to10" not in base.metrics
        total = sum(v for k, v in drone.metrics.items() if k.startswith("dwell_"))
        assert total == pytest.approx(1.0)
        assert base.metrics["rmse_density"] > 0
        assert base.metrics["speed_events"] == 1.0  # one probe in 40 steps

    def test_misaligned_traces(self, short_runs):
        base, drone = short_runs
        bad = dataclasses.replace(base.estimates, density_mean=base.estimates.density_mean[:-1])
        with pytest.raises(ValueError, match="misaligned"):
            compute_metrics(base.truth, bad, None)
        short = dataclasses.replace(drone.drone, cells=drone.drone.cells[:-1])
        with pytest.raises(ValueError):
            compute_metrics(drone.truth, drone.estimates, short)

    def test_config_validation(self):
        for kw in ({"mode": "plane"}, {"lam": 2.0}, {"horizon_steps": 0}, {"seed": -1}):
            with pytest.raises(ConfigError):
                RunConfig(**kw)


class TestCsv:
    def test_round_trip(self, short_runs, tmp_path):
        _, drone = short_runs
        write_run(drone, tmp_path)
        back = load_run(tmp_path)
        np.testing.assert_array_equal(back["truth_density"], drone.truth.density)
        np.testing.assert_array_equal(back["density_mean"], drone.estimates.density_mean)
        np.testing.assert_array_equal(back["vmax_std"], drone.estimates.vmax_std)
        np.testing.assert_array_equal(back["drone_cells"], drone.drone.cells)
        np.testing.assert_array_equal(back["J"], drone.estimates.J)
        for k, v in drone.metrics.items():
            assert back["metrics"][k] == v or (math.isnan(v) and math.isnan(back["metrics"][k]))

    def test_metrics_rebuilt_from_csv(self, short_runs, tmp_path):
        for i, res in enumerate(short_runs):
            write_run(res, tmp_path / str(i))
            again = metrics_from_run(tmp_path / str(i))
            assert again.keys() == res.metrics.keys()
            for k, v in res.metrics.items():
                assert again[k] == v or (math.isnan(v) and math.isnan(again[k]))

    def test_out_dir_writes_everything(self, tmp_path):
        run_experiment(RunConfig(horizon_steps=3, out_dir=str(tmp_path)))
        for name in ("truth.csv", "estimates.csv", "covtrace.csv", "metrics.csv", "vmax.svg"):
            assert (tmp_path / name).exists()

    def test_headers_and_encoding(self, short_runs, tmp_path):
        base, _ = short_runs
        write_run(base, tmp_path)
        assert not (tmp_path / "drone.csv").exists()
        for name, header in CSV_FILES.items():
            if name == "drone.csv":
                continue
            raw = (tmp_path / name).read_bytes()
            assert b"\r" not in raw
            assert raw.decode("utf-8").splitlines()[0] == ",".join(header)

    def test_byte_identical_rerun(self, tmp_path):
        cfg = RunConfig(horizon_steps=35, seed=1, mode="drone")
        a = write_run(run_experiment(cfg), tmp_path / "a")
        b = write_run(run_experiment(cfg), tmp_path / "b")
        for name in CSV_FILES:
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestTomlConfig:
    def test_full(self):
        cfg = config_from_text("""
[run]
mode = "drone"
lam = 0.25
horizon_steps = 50
seed = 7

[scenario]
demand = 6000
incidents = [{cell = 5, v_max = 25.0}]
capacity_clamp = true

[estimator]
n_members = 30
""")
        assert cfg.mode == "drone" and cfg.lam == 0.25 and cfg.seed == 7
        assert cfg.scenario.demand == 6000.0 and cfg.scenario.capacity_clamp
        assert cfg.scenario.incidents[0].v_max == 25.0
        assert cfg.estimator.n_members == 30

    def test_empty_is_default(self):
        assert config_from_text("") == RunConfig()

    def test_unknown_field_names_line(self):
        with pytest.raises(ConfigError, match=r"scenario\.demnd \(line 3\): unknown field"):
            config_from_text("[scenario]\ndemand = 1.0\ndemnd = 2.0\n")

    def test_type_error(self):
        with pytest.raises(ConfigError, match=r"estimator\.n_members \(line 2\)"):
            config_from_text("[estimator]\nn_members = 2.5\n")

    def test_value_error(self):
        with pytest.raises(ConfigError, match="scenario"):
            config_from_text("[scenario]\nprobe_cadence = 0\n")
        with pytest.raises(ConfigError, match="lam"):
            config_from_text("[run]\nlam = 3.0\n")

    def test_bad_incident(self):
        with pytest.raises(ConfigError, match="incidents"):
            config_from_text("[scenario]\nincidents = [{cell = 5}]\n")

    def test_syntax_and_section(self):
        with pytest.raises(ConfigError, match="invalid TOML"):
            config_from_text("[run\n")
        with pytest.raises(ConfigError, match="unknown section"):
            config_from_text("[planner]\nx = 1\n")
