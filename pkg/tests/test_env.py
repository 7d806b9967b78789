import numpy as np
import pandas as pd
import pytest

from factories import chain_network, flat_profiles, make_fleet, toy_env
from safeflex.env import (
    EnvConfig,
    FlexibilityEnv,
    ObsScaler,
    ProfileError,
    global_reward,
    load_profiles,
    local_revenue,
    profiles_from_arrays,
    state_from_observations,
    voltage_penalty,
)
from safeflex.grid import VoltageLimits


def zero_actions(env):
    return np.zeros((env.n_agents, 2))


def test_reset_contract():
    env = toy_env(n_agents=2)
    a = env.reset(1)
    b = env.reset(1)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (2, env.obs_dim)
    np.testing.assert_allclose(env.budget_remaining(), 0.5 * 24 * 5.0)
    np.testing.assert_allclose(env.energy, 12.5)


def test_reset_with_rng_is_reproducible():
    env = toy_env(n_days=10)
    days = []
    for _ in range(2):
        env.reset(rng=np.random.default_rng(4))
        days.append(env.row)
    assert days[0] == days[1]
    assert days[0] // 24 in env.train_days


def test_local_reward_example():
    env = toy_env(kappa_dr=0.0, kappa_ess=0.0)
    env.reset(0)
    # alpha_dr 0.4 of 5 kW, discharge 0.6 of 5 kW
    out = env.step([[0.4, -0.6]])
    np.testing.assert_allclose(out.powers["p_dr"], 2.0)
    np.testing.assert_allclose(out.powers["p_dis"], 3.0)
    assert out.rewards[0] == pytest.approx(0.1 * 5 - 0.15 * 8 - 0.01 * 2)
    assert out.rewards[0] == pytest.approx(-0.72)


def test_global_reward_is_sum_of_five_agents():
    env = toy_env(n_agents=5, kappa_dr=0.0, kappa_ess=0.0)
    env.reset(0)
    out = env.step(np.tile([0.4, -0.6], (5, 1)))
    assert global_reward(out) == pytest.approx(-3.6)
    np.testing.assert_allclose(out.local_revenue, -0.72)


def test_zero_prices_give_zero_reward():
    env = toy_env(lam_flex=0.0, lam_buy=0.0, lam_dr=0.0)
    env.reset(0)
    out = env.step([[0.7, 0.3]])
    assert global_reward(out) == 0.0


def test_idle_agents_without_demand():
    net = chain_network(2)
    fleet = make_fleet([1], p_dr=0.0)
    prices, exo = flat_profiles(net, fleet, 24, demand=0.0)
    env = FlexibilityEnv(net, fleet, prices, exo, EnvConfig(history_len=4, test_days=0))
    env.reset(0)
    out = env.step(zero_actions(env))
    assert out.rewards[0] == 0.0
    np.testing.assert_allclose(out.solution.v_sq_pu, 1.0)


def test_final_step_soc_penalty():
    env = toy_env(horizon=1, initial_soc_frac=0.4, kappa_dr=0.0)
    env.reset(0)
    out = env.step(zero_actions(env))
    assert out.done
    assert out.penalties["ess"][0] == pytest.approx(25.0)
    assert out.rewards[0] == pytest.approx(out.local_revenue[0] - 25.0)


def test_dr_overshoot_is_charged_once_per_kwh():
    env = toy_env(kappa_ess=0.0, kappa_dr=10.0)
    env.reset(0)
    pen = []
    for _ in range(24):
        pen.append(env.step([[1.0, 0.0]]).penalties["dr"][0])
    # 24 h at 5 kW against a 60 kWh budget
    assert sum(pen) == pytest.approx(10.0 * 60.0)
    assert pen[11] == 0.0 and pen[12] == pytest.approx(50.0)


def test_applied_actions_reflect_clamped_battery():
    env = toy_env(initial_soc_frac=1.0)
    env.reset(0)
    out = env.step([[0.0, 1.0]])
    np.testing.assert_allclose(out.applied_actions, [[0.0, 0.0]])


def test_episode_end_and_order_errors():
    env = toy_env(horizon=2)
    with pytest.raises(RuntimeError):
        env.step(zero_actions(env))
    env.reset(0)
    env.step(zero_actions(env))
    assert env.step(zero_actions(env)).done
    with pytest.raises(RuntimeError):
        env.step(zero_actions(env))
    with pytest.raises(ProfileError):
        env.reset(99)


def test_price_history_is_backfilled_then_zero_padded():
    env = toy_env(n_days=2)
    env.prices.lambda_flex[:] = np.arange(48)
    obs = env.reset(0)
    np.testing.assert_array_equal(obs[0, 3:7], [0, 0, 0, 0])
    obs = env.reset(1)
    np.testing.assert_array_equal(obs[0, 3:7], [21, 22, 23, 24])


def test_state_layout():
    env = toy_env(n_agents=3)
    obs = env.reset(0)
    state = env.global_state(obs)
    assert state.shape == (env.state_dim,)
    assert state_from_observations(np.stack([obs, obs]), 4).shape == (2, env.state_dim)


def test_obs_scaler_maps_into_unit_box():
    env = toy_env(n_agents=2)
    obs_s, state_s = ObsScaler.for_env(env)
    obs = env.reset(0)
    for _ in range(24):
        out = env.step([[1.0, -1.0], [0.2, 1.0]])
        for x, sc in ((out.observations, obs_s), (out.state, state_s)):
            y = sc(x)
            assert np.all(y >= -1e-12) and np.all(y <= 1 + 1e-12)
    assert obs.shape == obs_s.low.shape
    again = ObsScaler.from_dict(obs_s.to_dict())
    np.testing.assert_array_equal(again.high, obs_s.high)


def test_local_revenue_formula():
    assert local_revenue(0.1, 0.15, 0.01, 2, 0, 3, 10) == pytest.approx(-0.72)


LIM = VoltageLimits(0.95, 1.05)


def test_voltage_penalty_summed_form():
    assert voltage_penalty([1.0, 0.99, 1.01], LIM, 3.0) == 0.0
    trace = [1.06, 1.06, 1.045, 1.045]
    assert voltage_penalty(trace, LIM, 2.0) == pytest.approx(2.0 * (0.02 - 0.005 * 2))
    # enough slack inside the band cancels the excursions in the summed form
    assert voltage_penalty([1.06, 1.06] + [1.045] * 4, LIM, 2.0) == 0.0
    assert voltage_penalty(trace, LIM, 2.0, per_step=True) == pytest.approx(2.0 * 0.02)
    assert voltage_penalty([0.9, 1.2], LIM, 0.0) == 0.0


def test_per_step_voltage_penalty_in_env():
    net = chain_network(2, r=0.2, x=0.2, v_min=0.99)
    fleet = make_fleet([1])
    prices, exo = flat_profiles(net, fleet, 24, demand=100.0)
    env = FlexibilityEnv(net, fleet, prices, exo, EnvConfig(history_len=4, test_days=0, kappa_v=5.0, per_step_voltage_penalty=True))
    env.reset(0)
    out = env.step([[0.0, 0.0]])
    v = np.sqrt(out.solution.v_sq_pu[1])
    assert out.violations.count == 1
    assert out.penalties["voltage"][0] == pytest.approx(5.0 * (0.99 - v))


def test_demand_must_exceed_dr_capacity():
    net = chain_network(2)
    fleet = make_fleet([1], p_dr=5.0)
    with pytest.raises(ProfileError, match="DR capacity"):
        flat_profiles(net, fleet, 24, demand=0.0)


def test_profile_length_mismatch():
    fleet = make_fleet([1])
    with pytest.raises(ProfileError):
        profiles_from_arrays(np.ones(3), np.ones(3), np.full((4, 2), 10.0), np.zeros((4, 2)), fleet)


def write_csvs(tmp_path, n_steps=24, n_bus=2, demand=10.0):
    stamps = pd.date_range("2024-01-01", periods=n_steps, freq="h").strftime("%Y-%m-%d %H:%M")
    pd.DataFrame({"timestamp": stamps, "lambda_flex": 0.1, "lambda_buy": 0.15}).to_csv(tmp_path / "prices.csv", index=False)
    rows = [
        {"timestamp": s, "bus_id": b, "active_kw": demand if b else 0.0, "reactive_kvar": 1.0 if b else 0.0}
        for s in stamps
        for b in range(n_bus)
    ]
    pd.DataFrame(rows).to_csv(tmp_path / "loads.csv", index=False)
    return tmp_path / "prices.csv", tmp_path / "loads.csv"


def test_load_profiles_roundtrip(tmp_path):
    prices_csv, loads_csv = write_csvs(tmp_path)
    prices, exo = load_profiles(prices_csv, loads_csv, chain_network(2), make_fleet([1]))
    assert len(prices) == 24
    np.testing.assert_allclose(exo.demand_kw, 10.0)


def test_load_profiles_errors(tmp_path):
    net, fleet = chain_network(2), make_fleet([1])
    prices_csv, loads_csv = write_csvs(tmp_path)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ProfileError, match="empty"):
        load_profiles(empty, loads_csv, net, fleet)
    header_only = tmp_path / "header.csv"
    header_only.write_text("timestamp,lambda_flex,lambda_buy\n")
    with pytest.raises(ProfileError, match="no data"):
        load_profiles(header_only, loads_csv, net, fleet)
    with pytest.raises(ProfileError, match="missing column"):
        load_profiles(loads_csv, loads_csv, net, fleet)
    write_csvs(tmp_path, demand=0.0)
    with pytest.raises(ProfileError, match="DR capacity"):
        load_profiles(prices_csv, loads_csv, net, fleet)
