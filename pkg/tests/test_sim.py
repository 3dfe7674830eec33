import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexgrid.mdp import Action, bau_policy
from flexgrid.sim import (
    Cluster,
    ConfigError,
    HouseSim,
    SetpointSchedule,
    SimulationError,
    ThermalParams,
    WeatherTrace,
    make_cluster,
    make_setpoints,
    make_weather,
    rc_update,
    sample_params,
    simulate_period,
    step_house,
    write_episodes_csv,
)

FLAT20 = make_setpoints("flat", 20.0)


def house(r=4.0, c=8.0, p=2.0, t=20.0, schedule=FLAT20, hid=1):
    return HouseSim(ThermalParams(hid, r, c, p), t, schedule)


# -- step_house ---------------------------------------------------------------


def test_equilibrium_is_fixed_point():
    for dt in (1, 15):
        h = house(t=18.0)
        assert step_house(h, 18.0, Action.OFF, dt) == 18.0


def test_hand_evaluated_update():
    # 20 + 0.25/8 * (-20/4 + 2) = 20 - 0.09375
    h = house(r=4.0, c=8.0, p=2.0, t=20.0)
    assert step_house(h, 0.0, Action.ON, 15) == pytest.approx(19.90625, abs=1e-12)
    assert round(h.room_temp, 3) == 19.906


def test_converges_to_on_steady_state():
    p = ThermalParams(1, 4.0, 8.0, 2.0)
    h = HouseSim(p, 20.0, FLAT20)
    for _ in range(10_000):
        step_house(h, 0.0, Action.ON, 15)
    assert h.room_temp == pytest.approx(0.0 + 4.0 * 2.0, abs=1e-9)
    assert p.steady_state_on(0.0) == 8.0


def test_non_finite_input_is_simulation_fault():
    with pytest.raises(SimulationError):
        step_house(house(), float("nan"), Action.ON, 15)
    with pytest.raises(SimulationError):
        step_house(house(t=float("inf")), 0.0, Action.ON, 15)


def test_rejects_other_step_lengths():
    with pytest.raises(ValueError):
        step_house(house(), 0.0, Action.ON, 5)


def test_noise_is_seeded_and_scaled():
    a, b = house(), house()
    ra, rb = np.random.default_rng(3), np.random.default_rng(3)
    for _ in range(5):
        step_house(a, 5.0, Action.ON, 15, ra, 0.02)
        step_house(b, 5.0, Action.ON, 15, rb, 0.02)
    assert a.room_temp == b.room_temp
    # per-minute noise variance is 1/15 of the per-15-minute one
    rng = np.random.default_rng(0)
    draws = []
    for _ in range(4000):
        h = house(t=18.0)
        step_house(h, 18.0, Action.OFF, 1, rng, 0.15)
        draws.append(h.room_temp - 18.0)
    assert np.std(draws) == pytest.approx(0.15 / math.sqrt(15), rel=0.05)


temps = st.floats(-10, 30)
params = st.builds(
    ThermalParams,
    st.just(1),
    st.floats(2.0, 10.0),
    st.floats(2.0, 12.0),
    st.floats(1.5, 8.0),
)


@given(params, temps, temps, st.sampled_from([1, 15]))
def test_on_never_below_off(p, t, t_out, dt):
    on = rc_update(t, t_out, 1, dt, p)
    off = rc_update(t, t_out, 0, dt, p)
    assert on >= off


@given(params, temps, temps, st.sampled_from([0, 1]), st.sampled_from([1, 15]))
def test_contracts_toward_equilibrium(p, t, t_out, u, dt):
    t_eq = t_out + u * p.resistance * p.heater_power
    assert dt / 60.0 / p.time_constant_h < 2
    assert abs(rc_update(t, t_out, u, dt, p) - t_eq) <= abs(t - t_eq) + 1e-9


default_params = st.builds(
    ThermalParams, st.just(1), st.floats(6.0, 10.0), st.floats(2.0, 5.0), st.floats(3.5, 6.0)
)


@given(default_params, st.floats(15.0, 25.0), st.floats(-5.0, 10.0), st.sampled_from([0, 1]))
def test_fifteen_minute_steps_agree_with_one_step(p, t, t_out, u):
    fine = t
    for _ in range(15):
        fine = rc_update(fine, t_out, u, 1, p)
    coarse = rc_update(t, t_out, u, 15, p)
    assert abs(fine - coarse) <= 0.05


# -- parameters ---------------------------------------------------------------


def test_thermal_params_validate():
    with pytest.raises(ValueError):
        ThermalParams(1, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        ThermalParams(1, 1.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        ThermalParams(1, 1.0, 1.0, float("nan"))


@given(st.integers(0, 2**32 - 1), st.sampled_from([19.5, 20.0, 21.5, 22.5]))
def test_sampled_heaters_can_hold_comfort(seed, max_sp):
    p = sample_params(np.random.default_rng(seed), 1, max_sp, design_outdoor=-5.0)
    assert p.can_hold(max_sp, -5.0)


def test_default_cluster():
    houses = make_cluster(8, seed=1)
    assert [h.house_id for h in houses] == list(range(1, 9))
    profiles = [len(h.schedule.breakpoints) for h in houses]
    assert profiles == [3, 1] * 4  # evening-step and flat alternate
    assert all(h.params.can_hold(h.schedule.max_setpoint, -5.0) for h in houses)
    again = make_cluster(8, seed=1)
    assert [h.params for h in houses] == [h.params for h in again]


# -- weather ------------------------------------------------------------------


def test_weather_deterministic():
    a, b = make_weather(11, 2), make_weather(11, 2)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, make_weather(12, 2).samples)


def test_noise_free_weather_has_minimum_at_six():
    w = make_weather(0, 1, resolution=1, noise_amplitude=0.0)
    day = w.samples[:1440]
    assert int(np.argmin(day)) == 360
    assert int(np.argmax(day)) == 900
    assert day.min() == pytest.approx(-5.0)
    assert day.max() == pytest.approx(10.0)


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.floats(-15, 0), st.floats(1, 15), st.floats(0, 4))
def test_weather_within_bounds(seed, lo, span, noise):
    w = make_weather(seed, 3, t_min=lo, t_max=lo + span, noise_amplitude=noise)
    assert w.samples.min() >= lo and w.samples.max() <= lo + span


def test_weather_coverage_and_resolution():
    w = make_weather(0, 2, resolution=5)
    assert w.n_minutes == 2 * 1440 + 1
    assert w.at(2 * 1440) == w.samples[-1]
    with pytest.raises(ConfigError):
        w.at(2 * 1440 + 1)
    with pytest.raises(ValueError):
        WeatherTrace(w.start, 7, w.samples)


# -- setpoints ----------------------------------------------------------------


def test_setpoint_profiles():
    assert make_setpoints("flat", 20).breakpoints == [(0, 20.0)]
    assert make_setpoints("evening-step", 20).breakpoints == [(0, 20.0), (1020, 21.5), (1320, 20.0)]
    assert make_setpoints("evening-step", 20, seed=4, days=3, jitter_minutes=30) == make_setpoints(
        "evening-step", 20, seed=4, days=3, jitter_minutes=30
    )
    with pytest.raises(ValueError):
        make_setpoints("weekend", 20)


def test_schedule_lookup_and_roundtrip():
    s = make_setpoints("evening-step", 20)
    assert [s.at(0, m) for m in (0, 1019, 1020, 1319, 1320, 1439)] == [20, 20, 21.5, 21.5, 20, 20]
    assert s.at(5, 1100) == 21.5  # single-day schedule repeats
    assert SetpointSchedule.from_dict(s.to_dict()) == s


def test_schedule_validation():
    with pytest.raises(ValueError):
        SetpointSchedule((((10, 20.0),),))
    with pytest.raises(ValueError):
        SetpointSchedule((((0, 20.0), (600, 21.0), (600, 22.0)),))
    with pytest.raises(ValueError):
        SetpointSchedule((((0, 26.0),),))


# -- simulate_period / Cluster ------------------------------------------------


def test_one_day_gives_96_transitions():
    w = make_weather(0, 2)
    logs = simulate_period([house()], None, w, days=1)
    (episode,) = logs[1]
    assert len(episode) == 96
    assert episode[-1].terminal and not any(tr.terminal for tr in episode[:-1])
    assert all(tr.action == bau_policy(tr.state, tr.setpoint) for tr in episode)


def test_thirty_days_give_2880_transitions():
    w = make_weather(0, 31)
    logs = simulate_period([house()], None, w, days=30)
    assert sum(len(ep) for ep in logs[1]) == 2880


def test_short_weather_is_config_error():
    with pytest.raises(ConfigError):
        simulate_period([house()], None, make_weather(0, 1), days=2)


def test_history_uses_15_minute_boundaries():
    w = make_weather(0, 2, resolution=1)
    cl = Cluster([house(t=18.0)], w, k=2)
    seen = []
    for _ in range(31):
        if cl.clock % 15 == 0:
            seen.append(cl.houses[0].room_temp)
        cl.step([Action.ON], 1)
    state = cl.state(0)
    # at minute 31: boundary temps of minutes 15 and 30, then the live one
    assert state.room_temp_history[:2] == (seen[1], seen[2])
    assert state.room_temp == cl.houses[0].room_temp
    assert state.minute_of_day == 31


def test_cluster_refresh_holds_bau():
    w = make_weather(0, 2)
    cl = Cluster([house(t=20.5), house(t=19.0, hid=2)], w)
    assert cl.refresh_thermostats() == [Action.OFF, Action.ON]
    assert cl.held == [Action.OFF, Action.ON]


def test_episode_logs_are_byte_identical(tmp_path):
    houses_a = make_cluster(2, seed=5)
    houses_b = make_cluster(2, seed=5)
    w = make_weather(5, 3)
    a = simulate_period(houses_a, None, w, 2, noise_std=0.02, seed=9)
    b = simulate_period(houses_b, None, w, 2, noise_std=0.02, seed=9)
    pa = write_episodes_csv(tmp_path / "a.csv", a)
    pb = write_episodes_csv(tmp_path / "b.csv", b)
    assert pa.read_bytes() == pb.read_bytes()
