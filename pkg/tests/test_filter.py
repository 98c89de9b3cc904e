import numpy as np
import pytest
from scipy import stats
from scipy.integrate import solve_ivp

from cavdetect.delay import TimedTrace
from cavdetect.detector import run_detection
from cavdetect.filter import (
    DelayedEKF,
    FilterConfig,
    FilterDivergence,
    FilterState,
    NoiseConfig,
    update,
)
from cavdetect.motion import IdmParams, idm_accel, idm_gradient
from cavdetect.scenario import ScenarioConfig, measurement_seed, simulate, to_measurements


def constant_leader(x0=60.0, v=15.0, t_end=30.0, dt=0.1, t0=-5.0):
    t = np.arange(t0, t_end + 1e-9, dt)
    return TimedTrace.from_array(t0, dt, np.column_stack([x0 + v * t, np.full_like(t, v)]))


def test_update_hand_case():
    state = FilterState(np.zeros(2), np.eye(2), 0.0)
    post, rec = update(state, [1.0, 0.0], np.eye(2), np.eye(2))
    # S = 2 I, chi2 = 1/2, K = I/2
    assert rec.chi2 == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(rec.innovation_cov, 2 * np.eye(2))
    np.testing.assert_allclose(rec.gain, 0.5 * np.eye(2))
    np.testing.assert_allclose(post.mean, [0.5, 0.0])
    np.testing.assert_allclose(post.cov, 0.5 * np.eye(2))


def test_update_with_augmented_measurement():
    H = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    state = FilterState(np.array([10.0, 5.0, 1.0]), np.diag([1.0, 1.0, 1.0]), 0.0)
    post, rec = update(state, [11.0, 5.0], H, np.eye(2))
    # x + bias already predicts the reading exactly
    assert rec.chi2 == 0.0
    np.testing.assert_allclose(rec.predicted_measurement, [11.0, 5.0])
    np.testing.assert_allclose(rec.innovation_cov, [[3.0, 0.0], [0.0, 2.0]])
    np.testing.assert_allclose(post.mean, state.mean)


def test_update_is_pure():
    mean, cov = np.array([1.0, 2.0]), np.eye(2)
    state = FilterState(mean, cov, 0.0)
    update(state, [3.0, 1.0], np.eye(2), np.eye(2))
    np.testing.assert_array_equal(state.mean, [1.0, 2.0])
    np.testing.assert_array_equal(state.cov, np.eye(2))


def test_ill_conditioned_innovation_covariance_raises():
    state = FilterState(np.zeros(2), np.diag([1e14, 0.0]), 0.0)
    with pytest.raises(FilterDivergence):
        update(state, [0.0, 0.0], np.eye(2), np.diag([1e-2, 1e-2]))


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(np.diag([1.0, -1.0]), np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        NoiseConfig(np.eye(2), np.diag([1.0, 0.0]), np.eye(2))
    with pytest.raises(ValueError):
        FilterConfig(model="aekf", noise=NoiseConfig.default("ekf"))
    with pytest.raises(ValueError):
        FilterConfig(model="ukf")


def test_model_selects_state_dimension():
    assert FilterConfig(model="aekf").dim == 3
    assert FilterConfig(model="ekf").dim == 2
    np.testing.assert_array_equal(FilterConfig(model="aekf").H, [[1, 0, 1], [0, 1, 0]])


def _reference_step(filt: DelayedEKF, leader: TimedTrace, t0: float, dt: float):
    """Integrate the prediction ODE with an adaptive solver, reading delayed values from the filter's stored history."""
    cfg = filt.config
    n = cfg.dim
    tau = cfg.delay
    Q = cfg.noise.process_cov
    history = filt._history

    def rhs(t, y):
        mean, cov = y[:n], y[n:].reshape(n, n)
        lag = mean if tau == 0 else history.at(t - tau)[:n]
        x_l, v_l = leader.at(t - tau)
        acc = idm_accel(lag[0], lag[1], x_l, v_l, cfg.idm)
        d_x, d_v, _, _ = idm_gradient(lag[0], lag[1], x_l, v_l, cfg.idm)
        F = np.zeros((n, n))
        F[0, 1] = 1.0
        F[1, 0], F[1, 1] = d_x, d_v
        dm = np.zeros(n)
        dm[0] = lag[1]
        dm[1] = acc
        if n == 3:
            F[0, 2] = 1.0
            dm[0] += lag[2]
        dP = F @ cov + cov @ F.T + Q
        return np.concatenate([dm, dP.ravel()])

    y0 = np.concatenate([filt.state.mean, filt.state.cov.ravel()])
    sol = solve_ivp(rhs, (t0, t0 + dt), y0, method="DOP853", rtol=1e-12, atol=1e-12)
    return sol.y[:n, -1], sol.y[n:, -1].reshape(n, n)


@pytest.mark.parametrize("model, tau", [("aekf", 0.0), ("ekf", 0.0), ("aekf", 0.5), ("ekf", 1.5)])
def test_one_predict_step_matches_fine_reference(model, tau):
    leader = constant_leader()
    cfg = FilterConfig(model=model, delay=tau)
    filt = DelayedEKF(cfg, leader)
    filt.initialize([30.0, 17.0], 0.0)
    ref_mean, ref_cov = _reference_step(filt, leader, 0.0, cfg.dt)
    state = filt.predict()
    np.testing.assert_allclose(state.mean, ref_mean, rtol=0, atol=1e-6)
    np.testing.assert_allclose(state.cov, ref_cov, rtol=0, atol=1e-6)
    assert state.t == pytest.approx(0.1)


def test_stationary_follower_at_equilibrium_stays_put():
    params = IdmParams()
    v = 15.0
    gap = params.equilibrium_gap(v) + params.vehicle_length
    leader = constant_leader(x0=gap, v=v)
    filt = DelayedEKF(FilterConfig(model="aekf", delay=0.5), leader)
    filt.initialize([0.0, v], 0.0)
    for _ in range(10):
        state = filt.predict()
    assert state.mean[1] == pytest.approx(v, abs=1e-9)
    assert state.mean[0] == pytest.approx(v * 1.0, abs=1e-9)


def test_bias_variance_grows_by_its_process_noise():
    cfg = FilterConfig(model="aekf")
    filt = DelayedEKF(cfg, constant_leader())
    filt.initialize([30.0, 15.0], 0.0)
    before = filt.state.cov[2, 2]
    filt.predict()
    # the bias row of F is zero, so only Q enters its variance
    expected = before + cfg.noise.process_cov[2, 2] * cfg.dt
    assert filt.state.cov[2, 2] == pytest.approx(expected, abs=1e-12)


@pytest.fixture(scope="module")
def nominal_runs():
    cfg = ScenarioConfig(duration=600.0, seed=7)
    pair = simulate(cfg)
    _, z = to_measurements(pair, (cfg.pos_noise_std, cfg.vel_noise_std), measurement_seed(cfg.seed))
    return {m: run_detection(pair.leader, z, FilterConfig(model=m), None) for m in ("ekf", "aekf")}


@pytest.mark.parametrize("model", ["ekf", "aekf"])
def test_nominal_innovations_are_white_at_zero_delay(nominal_runs, model):
    run = nominal_runs[model]
    chi2 = run.chi2[run.scored]
    nu = run.innovations[run.scored]
    assert len(chi2) >= 5000
    stderr = nu.std(axis=0, ddof=1) / np.sqrt(len(nu))
    assert np.all(np.abs(nu.mean(axis=0)) < 3 * stderr)
    assert stats.kstest(chi2, stats.chi2(2).cdf).pvalue > 0.01


def test_covariance_stays_psd_and_updates_shrink_it():
    cfg = ScenarioConfig(duration=60.0, seed=3, delay=0.5)
    pair = simulate(cfg)
    _, z = to_measurements(pair, (cfg.pos_noise_std, cfg.vel_noise_std), measurement_seed(3))
    fcfg = FilterConfig(model="aekf", delay=0.5)
    filt = DelayedEKF(fcfg, pair.leader, hold_first=True)
    filt.initialize(z[5], 0.5)
    for k in range(6, len(z)):
        prior = filt.predict()
        assert np.linalg.eigvalsh(prior.cov).min() > -1e-9
        post, _ = filt.update(z[k])
        assert np.linalg.eigvalsh(post.cov).min() > -1e-9
        assert np.linalg.eigvalsh(prior.cov - post.cov).min() > -1e-9
