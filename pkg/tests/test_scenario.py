import math

import numpy as np
import pytest

from cavdetect.scenario import (
    CollisionError,
    ScenarioConfig,
    TrajectoryFormatError,
    export_csv,
    ingest_csv,
    measurement_seed,
    simulate,
    to_measurements,
)

QUIET = dict(leader_accel_noise=0.0, follower_accel_noise=0.0)


def test_constant_leader_keeps_follower_at_its_speed():
    cfg = ScenarioConfig(profile="constant", leader_speed=20.0, duration=60.0, delay=0.5, **QUIET)
    pair = simulate(cfg)
    assert np.abs(pair.follower.values[:, 1] - 20.0).max() < 0.1


def test_free_road_acceleration_is_monotone():
    cfg = ScenarioConfig(profile="constant", leader_speed=0.0, follower_speed=0.0, initial_gap=5000.0, duration=60.0, **QUIET)
    v = simulate(cfg).follower.values[:, 1]
    assert np.all(np.diff(v) >= 0)
    assert v[-1] > 20.0


def test_follower_lags_sinusoidal_leader():
    cfg = ScenarioConfig(profile="sinusoidal", delay=0.5, duration=180.0, **QUIET)
    pair = simulate(cfg)
    vl = pair.leader.values[:, 1] - pair.leader.values[:, 1].mean()
    vf = pair.follower.values[:, 1] - pair.follower.values[:, 1].mean()
    lags = np.arange(0, 100)
    corr = [np.dot(vl[: len(vl) - k], vf[k:]) for k in lags]
    assert lags[int(np.argmax(corr))] * cfg.dt > 0.5


def test_positions_integrate_speeds():
    pair = simulate(ScenarioConfig(duration=60.0, seed=1))
    x = pair.follower.values[:, 0]
    v = pair.follower.values[:, 1]
    dt = pair.dt
    # trapezoid rule on the sampled speed; held noise is piecewise constant so the error is O(dt^2) per step
    dx = np.diff(x)
    trap = 0.5 * dt * (v[1:] + v[:-1])
    assert np.abs(dx - trap).max() < 0.5 * dt**2 * 3.0


def test_simulation_is_seeded():
    a = simulate(ScenarioConfig(duration=30.0, seed=4))
    b = simulate(ScenarioConfig(duration=30.0, seed=4))
    c = simulate(ScenarioConfig(duration=30.0, seed=5))
    np.testing.assert_array_equal(a.follower.values, b.follower.values)
    assert not np.array_equal(a.follower.values, c.follower.values)


def test_row_count_matches_duration():
    pair = simulate(ScenarioConfig(duration=12.0))
    assert len(pair) == 121
    assert pair.times[-1] == pytest.approx(12.0)


def test_collision_is_reported_with_time():
    cfg = ScenarioConfig(profile="constant", leader_speed=0.0, follower_speed=25.0, initial_gap=40.0, delay=1.5, duration=20.0, **QUIET)
    with pytest.raises(CollisionError) as info:
        simulate(cfg)
    assert 0.0 < info.value.time < 20.0


def test_measurement_noise_levels():
    pair = simulate(ScenarioConfig(duration=10.0))
    big = type(pair)(pair.leader, pair.follower)
    clean, noisy = to_measurements(big, (0.5, 0.3), 0)
    np.testing.assert_array_equal(clean, pair.follower.values)
    reps = np.concatenate([to_measurements(big, (0.5, 0.3), s)[1] - clean for s in range(1000)])
    assert len(reps) >= 100_000
    np.testing.assert_allclose(reps.std(axis=0), [0.5, 0.3], rtol=0.02)
    clean0, noisy0 = to_measurements(pair, (0.0, 0.0), 1)
    np.testing.assert_array_equal(clean0, noisy0)


def test_measurement_seed_is_reproducible():
    a = measurement_seed(3).normal(size=3)
    b = measurement_seed(3).normal(size=3)
    np.testing.assert_array_equal(a, b)


def test_csv_round_trip_is_identity(tmp_path):
    cfg = ScenarioConfig(duration=20.0, seed=2)
    pair = simulate(cfg)
    _, z = to_measurements(pair, (cfg.pos_noise_std, cfg.vel_noise_std), 2)
    path = tmp_path / "traj.csv"
    export_csv(pair, path, z)
    back = ingest_csv(path)
    np.testing.assert_array_equal(back.leader.values, pair.leader.values)
    np.testing.assert_array_equal(back.follower.values, pair.follower.values)
    np.testing.assert_array_equal(back.measurements, z)
    np.testing.assert_allclose(back.times, pair.times, atol=1e-12)


def _write(tmp_path, text):
    path = tmp_path / "in.csv"
    path.write_text(text)
    return path


def test_minimal_two_row_file(tmp_path):
    pair = ingest_csv(_write(tmp_path, "t,x_lead,v_lead,x_follow,v_follow\n0,30,10,0,10\n0.1,31,10,1,10\n"))
    assert len(pair) == 2
    assert pair.dt == pytest.approx(0.1)
    assert pair.measurements is None


def test_missing_column_is_named(tmp_path):
    with pytest.raises(TrajectoryFormatError, match="v_follow"):
        ingest_csv(_write(tmp_path, "t,x_lead,v_lead,x_follow\n0,30,10,0\n"))


def test_nan_rows_are_reported_with_line_numbers(tmp_path):
    text = "t,x_lead,v_lead,x_follow,v_follow\n0,30,10,0,10\n0.1,nan,10,1,10\n0.2,32,10,2,10\n"
    with pytest.raises(TrajectoryFormatError, match="line 3"):
        ingest_csv(_write(tmp_path, text))


def test_non_uniform_timestamps_rejected(tmp_path):
    text = "t,x_lead,v_lead,x_follow,v_follow\n0,30,10,0,10\n0.1,31,10,1,10\n0.25,32,10,2,10\n"
    with pytest.raises(TrajectoryFormatError, match="non-uniform"):
        ingest_csv(_write(tmp_path, text))


def test_gap_violation_rejected(tmp_path):
    text = "t,x_lead,v_lead,x_follow,v_follow\n0,30,10,0,10\n0.1,4,10,1,10\n"
    with pytest.raises(TrajectoryFormatError, match="gap"):
        ingest_csv(_write(tmp_path, text))


def test_config_validation_and_mapping():
    with pytest.raises(ValueError):
        ScenarioConfig(profile="zigzag")
    with pytest.raises(ValueError):
        ScenarioConfig(initial_gap=6.0)
    cfg = ScenarioConfig.from_mapping({"duration": 50.0, "time_headway": 1.2})
    assert cfg.duration == 50.0 and cfg.idm.time_headway == 1.2
    with pytest.raises(KeyError, match="colour"):
        ScenarioConfig.from_mapping({"colour": "red"})
    assert ScenarioConfig(follower_speed=10.0).start_gap == pytest.approx(
        ScenarioConfig().idm.equilibrium_gap(10.0) + 5.0
    )
    assert math.isfinite(ScenarioConfig().start_gap)
