import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexgrid.fqi import (
    NetRegressor,
    QFunction,
    TabularQ,
    ToyMDP,
    TrainingError,
    advantage,
    advantages,
    dp_oracle,
    encode_features,
    fqi_fit,
    load_qfunction,
    retrain_all,
    save_qfunction,
    value,
    values,
)
from flexgrid.mdp import Action, ExperienceBuffer, HouseholdState, Transition, bau_policy
from flexgrid.sim import ThermalParams, make_cluster, make_setpoints, make_weather, simulate_period

FLAT = make_setpoints("flat", 19.0)
EVENING = make_setpoints("evening-step", 19.0)
TOY_PARAMS = ThermalParams(0, resistance=3.5, capacitance=0.55, heater_power=2.0)


def small_toy(schedule=EVENING, horizon=96, n=20, costs=None):
    return ToyMDP(np.linspace(15.0, 22.0, n), TOY_PARAMS, 15.0, schedule, horizon=horizon, costs=costs)


def hand_q(toy):
    """Backward induction written out state by state, independent of dp_oracle."""
    H, n = toy.horizon, toy.n_temps
    q = {}
    for t in reversed(range(H)):
        for i in range(n):
            for u in (0, 1):
                total = toy.cost[u]
                if t < H - 1:
                    j = toy.next_index[u, i]
                    bau = 0 if toy.temps[j] > toy.setpoints[t + 1] else 1
                    total += q[t + 1, j, bau]
                q[t, i, u] = total
    return np.array([[[q[t, i, u] for u in (0, 1)] for i in range(n)] for t in range(H)])


@pytest.fixture(scope="module")
def house_buffer():
    houses = make_cluster(2, seed=3)
    logs = simulate_period(houses, None, make_weather(3, 31), 30, noise_std=0.02, seed=3)
    bufs = {}
    for h, eps in logs.items():
        bufs[h] = ExperienceBuffer(30)
        for ep in eps:
            bufs[h].push(ep)
    return houses, bufs


@pytest.fixture(scope="module")
def house_q(house_buffer):
    houses, bufs = house_buffer
    return fqi_fit(bufs[1], houses[0].schedule, iterations=5, seed=0)


# -- features -----------------------------------------------------------------


def test_time_features():
    s0 = HouseholdState(0, 0.0, (20.0,))
    s6 = HouseholdState(360, 0.0, (20.0,))
    np.testing.assert_allclose(encode_features(s0)[:2], [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(encode_features(s6)[:2], [1.0, 0.0], atol=1e-12)
    assert len(encode_features(HouseholdState(0, 0.0, (20.0,) * 5))) == 8


def test_features_standardize_temperatures():
    s = HouseholdState(0, 4.0, (18.0, 22.0))
    np.testing.assert_allclose(encode_features(s, 20.0, 2.0)[2:], [-8.0, -1.0, 1.0])


# -- dp oracle ----------------------------------------------------------------


def test_dp_matches_hand_unrolled_recursion():
    toy = small_toy(horizon=12, n=8)
    np.testing.assert_allclose(dp_oracle(toy), hand_q(toy), atol=1e-12)


def test_terminal_layer_is_immediate_cost():
    toy = small_toy()
    q = dp_oracle(toy)
    np.testing.assert_array_equal(q[-1], np.tile(toy.cost, (toy.n_temps, 1)))


def test_zero_cost_gives_zero_q():
    assert np.all(dp_oracle(small_toy(costs=(0.0, 0.0))) == 0.0)


def test_single_state_three_steps_always_on():
    # T_out + R*P is a fixed point under ON; BAU stays ON when the setpoint is high
    p = ThermalParams(0, 1.0, 1.0, 2.0)
    toy = ToyMDP(np.array([20.0]), p, 18.0, make_setpoints("flat", 21.0), horizon=3, costs=(0.0, 0.5),
                 snap_tolerance=5.0)
    assert dp_oracle(toy)[0, 0, 1] == pytest.approx(1.5)


def test_open_grid_is_rejected():
    with pytest.raises(ValueError):
        ToyMDP(np.linspace(17.0, 20.0, 10), TOY_PARAMS, 15.0, FLAT)


# -- fqi ----------------------------------------------------------------------


def test_empty_buffer_is_training_error():
    with pytest.raises(TrainingError):
        fqi_fit(ExperienceBuffer(30), FLAT)


def test_missing_action_is_training_error():
    s = HouseholdState(0, 0.0, (20.0,))
    only_on = [Transition(s, 20.0, Action.ON, 0.5, s, 20.0, False, 0, i) for i in range(5)]
    with pytest.raises(TrainingError):
        fqi_fit(only_on)


def test_one_iteration_regresses_cost(house_buffer):
    houses, bufs = house_buffer
    q = fqi_fit(bufs[1], houses[0].schedule, iterations=1, seed=0)
    trs = bufs[1].transitions[:200]
    qv = q.q_values([tr.state for tr in trs])
    p = houses[0].params.heater_power
    # every ON transition costs P/4, every OFF one 0: the fit reproduces that
    np.testing.assert_allclose(qv[:, 1], p / 4, atol=1e-9)
    np.testing.assert_allclose(qv[:, 0], 0.0, atol=1e-9)


def test_thirty_days_train_on_2880_samples(house_q):
    assert house_q.meta["n_samples"] == 2880
    assert house_q.k == 4


def test_fit_is_seed_deterministic(house_buffer, house_q):
    houses, bufs = house_buffer
    again = fqi_fit(bufs[1], houses[0].schedule, iterations=5, seed=0)
    states = [tr.state for tr in bufs[1].transitions[::37]]
    np.testing.assert_array_equal(house_q.q_values(states), again.q_values(states))


def test_value_picks_bau_head(house_buffer, house_q):
    _, bufs = house_buffer
    for tr in bufs[1].transitions[::97]:
        qv = house_q.q_values([tr.state])[0]
        v = value(house_q, tr.state, tr.setpoint)
        assert v in (qv[0], qv[1])
        if tr.state.room_temp > tr.setpoint:
            assert v == qv[0]
        else:
            assert v == qv[1]


def test_bau_advantage_is_exactly_zero(house_buffer, house_q):
    _, bufs = house_buffer
    states = [tr.state for tr in bufs[1].transitions]
    sps = [tr.setpoint for tr in bufs[1].transitions]
    bau = [bau_policy(s, sp) for s, sp in zip(states, sps)]
    assert np.all(advantages(house_q, states, sps, bau) == 0.0)


def test_setpoint_only_switches_the_branch(house_buffer, house_q):
    _, bufs = house_buffer
    s = bufs[1].transitions[500].state
    qv = house_q.q_values([s])[0]
    for sp in (s.room_temp - 0.5, s.room_temp + 0.5):
        a_on = advantage(house_q, s, sp, Action.ON)
        v = qv[bau_policy(s, sp)]
        assert a_on == qv[1] - v


def test_toy_fqi_matches_dp_and_converges():
    toy = small_toy(horizon=24, n=12)
    errs = []
    q_dp = dp_oracle(toy)
    states = [toy.state(t, i) for t in range(toy.horizon) for i in range(toy.n_temps)]

    def track(it, q):
        errs.append(np.max(np.abs(q.q_values(states).reshape(q_dp.shape) - q_dp)))

    q = fqi_fit(toy.transitions(), iterations=toy.horizon + 1, seed=0,
                regressor_params={"n_estimators": 10, "min_samples_leaf": 1}, callback=track)
    assert errs[-1] <= 0.02
    assert errs[-1] <= errs[-2] <= errs[-3]
    assert np.min(q.q_values(states)) >= -0.05
    # value and non-BAU advantage against the exact table
    tab = TabularQ(toy)
    sps = [toy.setpoints[t] for t in range(toy.horizon) for _ in range(toy.n_temps)]
    np.testing.assert_allclose(values(q, states, sps), values(tab, states, sps), atol=0.02)
    non_bau = [Action(1 - bau_policy(s, sp)) for s, sp in zip(states, sps)]
    np.testing.assert_allclose(advantages(q, states, sps, non_bau), advantages(tab, states, sps, non_bau), atol=0.04)


def test_net_regressor_shares_contract():
    toy = small_toy(horizon=8, n=6)
    q = fqi_fit(toy.transitions(), iterations=2, seed=0, regressor="mlp")
    assert isinstance(q.heads[Action.ON], NetRegressor)
    assert np.all(np.isfinite(q.q_values([toy.state(0, 0)])))


# -- retraining ---------------------------------------------------------------


def test_retrain_isolates_a_corrupt_house(house_buffer):
    houses, bufs = house_buffer
    broken = dict(bufs)
    broken[99] = ExperienceBuffer(30)
    res = retrain_all(broken, iterations=2, seed=1)
    assert set(res.qfns) == {1, 2}
    assert set(res.faults) == {99}
    assert {h for h, _, _ in res.train_log} == {1, 2}


def test_retrain_deterministic(house_buffer):
    _, bufs = house_buffer
    a = retrain_all(bufs, iterations=2, seed=4)
    b = retrain_all(bufs, iterations=2, seed=4)
    states = [tr.state for tr in bufs[2].transitions[::50]]
    np.testing.assert_array_equal(a.qfns[2].q_values(states), b.qfns[2].q_values(states))


def test_qfunction_roundtrip(tmp_path, house_buffer, house_q):
    _, bufs = house_buffer
    path = save_qfunction(house_q, tmp_path / "qfn_1_2023-02-08.pkl")
    loaded = load_qfunction(path)
    states = [tr.state for tr in bufs[1].transitions[::91]]
    np.testing.assert_array_equal(loaded.q_values(states), house_q.q_values(states))
    assert loaded.meta == house_q.meta
    path.write_bytes(b"not a model")
    with pytest.raises(Exception):
        load_qfunction(path)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1439), st.floats(-5, 10), st.lists(st.floats(15, 25), min_size=5, max_size=5), st.floats(18, 23))
def test_bau_advantage_zero_property(house_q, minute, t_out, hist, sp):
    s = HouseholdState(minute, t_out, tuple(hist))
    assert advantage(house_q, s, sp, bau_policy(s, sp)) == 0.0
