"""Simulated household cluster.

Every apartment is a first-order (1R1C) thermal model integrated with forward
Euler::

    T' = T + dt/C * ((T_out - T)/R + u * P)

with ``dt`` in hours, R in K/kW, C in kWh/K and P the heater power in kW
(COP 1, electrical power equals heat input).
"""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Mapping, Sequence

import numpy as np

from ._io import write_csv
from .mdp import (
    DEFAULT_HISTORY,
    MINUTES_PER_DAY,
    STEP_MINUTES,
    Action,
    HouseholdState,
    Transition,
    bau_policy,
    step_cost,
)

Policy = Callable[[HouseholdState, float], Action]

SETPOINT_RANGE = (15.0, 25.0)
DEFAULT_START = datetime(2023, 1, 9)


class SimulationError(RuntimeError):
    """Raised when the thermal simulation is fed non-physical input."""


class ConfigError(ValueError):
    """Raised on inconsistent simulation or experiment configuration."""


@dataclass(frozen=True)
class ThermalParams:
    house_id: int
    resistance: float  # K/kW
    capacitance: float  # kWh/K
    heater_power: float  # kW

    def __post_init__(self):
        for name in ("resistance", "capacitance", "heater_power"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be strictly positive, got {value}")

    @property
    def time_constant_h(self) -> float:
        return self.resistance * self.capacitance

    def steady_state_on(self, outdoor_temp: float) -> float:
        return outdoor_temp + self.resistance * self.heater_power

    def can_hold(self, max_setpoint: float, design_outdoor: float) -> bool:
        """True if running flat out keeps the room above ``max_setpoint + 1``."""
        return self.steady_state_on(design_outdoor) > max_setpoint + 1.0


@dataclass(frozen=True)
class WeatherTrace:
    start: datetime
    resolution: int  # minutes
    samples: np.ndarray

    def __post_init__(self):
        if self.resolution <= 0 or STEP_MINUTES % self.resolution:
            raise ValueError(f"resolution must divide {STEP_MINUTES}, got {self.resolution}")

    @property
    def n_minutes(self) -> int:
        """Number of minutes (from start) with a defined outdoor temperature."""
        return (len(self.samples) - 1) * self.resolution + 1

    def at(self, minute: int) -> float:
        if not 0 <= minute < self.n_minutes:
            raise ConfigError(f"weather trace does not cover minute {minute}")
        return float(self.samples[minute // self.resolution])


def _diurnal_shape(minute_of_day: np.ndarray) -> np.ndarray:
    # -1 at 06:00, +1 at 15:00, half-cosine ramps in between
    m = np.asarray(minute_of_day, dtype=float) % MINUTES_PER_DAY
    rising = (m >= 360) & (m < 900)
    out = np.empty_like(m)
    out[rising] = -np.cos(np.pi * (m[rising] - 360) / 540)
    falling = (m[~rising] - 900) % MINUTES_PER_DAY
    out[~rising] = np.cos(np.pi * falling / 900)
    return out


def make_weather(
    seed: int,
    days: int,
    resolution: int = 15,
    t_min: float = -5.0,
    t_max: float = 10.0,
    noise_amplitude: float = 1.5,
    noise_knot_hours: float = 3.0,
    start: datetime = DEFAULT_START,
) -> WeatherTrace:
    """Winter outdoor temperature: diurnal cycle plus seeded smooth noise.

    The diurnal component has its minimum at 06:00 and its maximum at 15:00.
    Noise is piecewise-linear between random knots and the diurnal swing is
    shrunk by the noise amplitude so every sample stays inside ``[t_min, t_max]``.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    if t_max <= t_min:
        raise ValueError("t_max must exceed t_min")
    minutes = np.arange(0, days * MINUTES_PER_DAY + 1, resolution)
    half = (t_max - t_min) / 2
    amp = min(max(noise_amplitude, 0.0), half / 2)
    temps = (t_min + t_max) / 2 + (half - amp) * _diurnal_shape(minutes)
    if amp > 0:
        rng = np.random.default_rng(seed)
        knot_step = noise_knot_hours * 60
        knots_t = np.arange(0, minutes[-1] + knot_step + 1, knot_step)
        knots_v = rng.uniform(-amp, amp, size=len(knots_t))
        temps = temps + np.interp(minutes, knots_t, knots_v)
    return WeatherTrace(start=start, resolution=resolution, samples=np.clip(temps, t_min, t_max))


@dataclass(frozen=True)
class SetpointSchedule:
    """Piecewise-constant daily setpoint profile(s).

    ``days`` holds one breakpoint list per day; lookups beyond the stored days
    wrap around, so a single-day schedule repeats forever.
    """

    days: tuple[tuple[tuple[int, float], ...], ...]

    def __post_init__(self):
        if not self.days:
            raise ValueError("schedule needs at least one day")
        lo, hi = SETPOINT_RANGE
        for bps in self.days:
            if not bps or bps[0][0] != 0:
                raise ValueError("each day must start with a breakpoint at minute 0")
            minutes = [m for m, _ in bps]
            if any(b <= a for a, b in zip(minutes, minutes[1:])):
                raise ValueError(f"breakpoints not strictly sorted: {minutes}")
            if minutes[-1] >= MINUTES_PER_DAY:
                raise ValueError("breakpoint beyond end of day")
            if any(not lo <= sp <= hi for _, sp in bps):
                raise ValueError(f"setpoints must lie in [{lo}, {hi}]")

    @property
    def breakpoints(self) -> list[tuple[int, float]]:
        return list(self.days[0])

    @property
    def max_setpoint(self) -> float:
        return max(sp for bps in self.days for _, sp in bps)

    @property
    def min_setpoint(self) -> float:
        return min(sp for bps in self.days for _, sp in bps)

    def day(self, day: int) -> tuple[tuple[int, float], ...]:
        return self.days[day % len(self.days)]

    def at(self, day: int, minute_of_day: int) -> float:
        bps = self.day(day)
        i = bisect.bisect_right([m for m, _ in bps], minute_of_day) - 1
        return bps[i][1]

    def to_dict(self) -> dict:
        return {"days": [[[m, sp] for m, sp in bps] for bps in self.days]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "SetpointSchedule":
        return cls(tuple(tuple((int(m), float(sp)) for m, sp in bps) for bps in data["days"]))


def make_setpoints(
    profile: str,
    base: float,
    seed: int = 0,
    days: int = 1,
    step_start: int = 1020,
    step_end: int = 1320,
    offset: float = 1.5,
    jitter_minutes: int = 0,
) -> SetpointSchedule:
    """Build a ``flat`` or ``evening-step`` setpoint schedule.

    ``evening-step`` raises the setpoint by ``offset`` between ``step_start``
    and ``step_end`` (17:00-22:00 by default). With ``jitter_minutes`` > 0 the
    step times of each day move by a seeded multiple of 15 minutes.
    """
    lo, hi = SETPOINT_RANGE
    if not lo <= base <= hi:
        raise ValueError(f"base setpoint {base} outside [{lo}, {hi}]")
    base = float(base)
    if profile == "flat":
        return SetpointSchedule(tuple(((0, base),) for _ in range(days)))
    if profile != "evening-step":
        raise ValueError(f"unknown setpoint profile {profile!r}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(days):
        shift = 0
        if jitter_minutes:
            n = jitter_minutes // STEP_MINUTES
            shift = int(rng.integers(-n, n + 1)) * STEP_MINUTES
        out.append(((0, base), (step_start + shift, base + offset), (step_end + shift, base)))
    return SetpointSchedule(tuple(out))


@dataclass
class HouseSim:
    params: ThermalParams
    room_temp: float
    schedule: SetpointSchedule

    @property
    def house_id(self) -> int:
        return self.params.house_id


def rc_update(room_temp: float, outdoor_temp: float, action: int, dt: float, params: ThermalParams) -> float:
    """One forward-Euler step of the 1R1C model, ``dt`` in minutes. Broadcasts over arrays."""
    flow = (outdoor_temp - room_temp) / params.resistance + np.asarray(action, dtype=float) * params.heater_power
    return room_temp + (dt / 60.0) / params.capacitance * flow


def step_house(
    sim: HouseSim,
    outdoor_temp: float,
    action: Action,
    dt: int,
    rng: np.random.Generator | None = None,
    noise_std: float = 0.0,
) -> float:
    """Advance ``sim`` by ``dt`` minutes and return the new room temperature.

    ``noise_std`` is the per-15-minute standard deviation; it is scaled by
    sqrt(dt/15) so 1-minute and 15-minute stepping diffuse alike.
    """
    if dt not in (1, STEP_MINUTES):
        raise ValueError(f"dt must be 1 or {STEP_MINUTES} minutes, got {dt}")
    if int(action) not in (0, 1):
        raise ValueError(f"invalid action {action!r}")
    if not (math.isfinite(sim.room_temp) and math.isfinite(outdoor_temp)):
        raise SimulationError(f"house {sim.house_id}: non-finite temperature input")
    new = rc_update(sim.room_temp, outdoor_temp, action, dt, sim.params)
    if noise_std > 0 and rng is not None:
        new += rng.normal(0.0, noise_std * math.sqrt(dt / STEP_MINUTES))
    sim.room_temp = float(new)
    return sim.room_temp


def sample_params(
    rng: np.random.Generator,
    house_id: int,
    max_setpoint: float,
    design_outdoor: float = -5.0,
    r_range: tuple[float, float] = (6.0, 10.0),
    c_range: tuple[float, float] = (2.0, 5.0),
    p_range: tuple[float, float] = (3.5, 6.0),
    sizing_margin: float = 1.1,
) -> ThermalParams:
    """Draw house physics; the heater is upsized when needed to hold comfort."""
    r = rng.uniform(*r_range)
    c = rng.uniform(*c_range)
    p = rng.uniform(*p_range)
    needed = sizing_margin * (max_setpoint + 1.0 - design_outdoor) / r
    return ThermalParams(house_id, round(r, 4), round(c, 4), round(max(p, needed), 4))


def make_cluster(
    n_houses: int,
    seed: int,
    profiles: Sequence[str] | None = None,
    bases: Sequence[float] | None = None,
    design_outdoor: float = -5.0,
    schedule_days: int = 1,
) -> list[HouseSim]:
    """Default cluster: alternating evening-step / flat households."""
    rng = np.random.default_rng(seed)
    if profiles is None:
        profiles = ["evening-step" if i % 2 == 0 else "flat" for i in range(n_houses)]
    if bases is None:
        bases = [float(rng.choice([19.5, 20.0, 20.5, 21.0])) for _ in range(n_houses)]
    houses = []
    for i in range(n_houses):
        schedule = make_setpoints(profiles[i], bases[i], seed=seed + i, days=schedule_days)
        params = sample_params(rng, i + 1, schedule.max_setpoint, design_outdoor)
        houses.append(HouseSim(params, schedule.at(0, 0), schedule))
    return houses


class Cluster:
    """Runtime container stepping a set of houses on a shared clock.

    ``clock`` is the absolute minute since the weather trace start. Room
    temperature history is sampled at 15-minute boundaries: the state at any
    minute holds the k most recent boundary temperatures strictly before now,
    followed by the live temperature.
    """

    def __init__(
        self,
        houses: Sequence[HouseSim],
        weather: WeatherTrace,
        k: int = DEFAULT_HISTORY,
        noise_std: float = 0.0,
        seed: int | None = None,
        clock: int = 0,
    ):
        self.houses = list(houses)
        self.weather = weather
        self.k = k
        self.noise_std = noise_std
        self.clock = clock
        seeds = np.random.SeedSequence(seed if seed is not None else 0).spawn(len(self.houses))
        self._rngs = [np.random.default_rng(s) for s in seeds]
        self._history = [deque([h.room_temp] * k, maxlen=k) if k else deque(maxlen=0) for h in self.houses]
        self.held = [Action.ON] * len(self.houses)
        self.refresh_thermostats()

    def __len__(self):
        return len(self.houses)

    @property
    def ids(self) -> list[int]:
        return [h.house_id for h in self.houses]

    @property
    def powers(self) -> list[float]:
        return [h.params.heater_power for h in self.houses]

    @property
    def day(self) -> int:
        return self.clock // MINUTES_PER_DAY

    @property
    def minute_of_day(self) -> int:
        return self.clock % MINUTES_PER_DAY

    def outdoor(self) -> float:
        return self.weather.at(self.clock)

    def state(self, i: int) -> HouseholdState:
        hist = tuple(self._history[i]) + (self.houses[i].room_temp,)
        return HouseholdState(self.minute_of_day, self.outdoor(), hist)

    def states(self) -> list[HouseholdState]:
        return [self.state(i) for i in range(len(self.houses))]

    def setpoint(self, i: int) -> float:
        return self.houses[i].schedule.at(self.day, self.minute_of_day)

    def setpoints(self) -> list[float]:
        return [self.setpoint(i) for i in range(len(self.houses))]

    def refresh_thermostats(self) -> list[Action]:
        """Re-evaluate every house's BAU thermostat decision and hold it."""
        self.held = [bau_policy(s, sp) for s, sp in zip(self.states(), self.setpoints())]
        return list(self.held)

    def step(self, actions: Sequence[Action], dt: int) -> list[float]:
        if len(actions) != len(self.houses):
            raise ValueError("one action per house required")
        if dt == STEP_MINUTES and self.clock % STEP_MINUTES:
            raise ValueError("15-minute steps must start on a 15-minute boundary")
        if self.clock + dt >= self.weather.n_minutes:
            raise ConfigError(f"weather trace ends before minute {self.clock + dt}")
        at_boundary = self.clock % STEP_MINUTES == 0
        t_out = self.outdoor()
        temps = []
        for i, (house, action) in enumerate(zip(self.houses, actions)):
            if at_boundary and self.k:
                self._history[i].append(house.room_temp)
            temps.append(step_house(house, t_out, action, dt, self._rngs[i], self.noise_std))
        self.clock += dt
        return temps

    def run(self, policies: Sequence[Policy], days: int, dt: int = STEP_MINUTES) -> dict[int, list[list[Transition]]]:
        """Simulate whole days from a day boundary, logging every step."""
        if len(policies) != len(self.houses):
            raise ValueError("one policy per house required")
        if self.clock % MINUTES_PER_DAY:
            raise ValueError("run() must start at midnight")
        end = self.clock + days * MINUTES_PER_DAY
        if end >= self.weather.n_minutes:
            raise ConfigError(f"weather covers {self.weather.n_minutes} minutes, need {end + 1}")
        logs: dict[int, list[list[Transition]]] = {h.house_id: [] for h in self.houses}
        steps_per_day = MINUTES_PER_DAY // dt
        for _ in range(days):
            day = self.day
            episode: list[list[Transition]] = [[] for _ in self.houses]
            for step in range(steps_per_day):
                states = self.states()
                sps = self.setpoints()
                actions = [pol(s, sp) for pol, s, sp in zip(policies, states, sps)]
                self.step(actions, dt)
                next_states = self.states()
                next_sps = self.setpoints()
                terminal = step == steps_per_day - 1
                for i, house in enumerate(self.houses):
                    episode[i].append(
                        Transition(
                            state=states[i],
                            setpoint=sps[i],
                            action=actions[i],
                            cost=step_cost(actions[i], house.params.heater_power, dt),
                            next_state=next_states[i],
                            next_setpoint=next_sps[i],
                            terminal=terminal,
                            day=day,
                            step=step,
                        )
                    )
            for i, house in enumerate(self.houses):
                logs[house.house_id].append(episode[i])
        self.refresh_thermostats()
        return logs


def simulate_period(
    cluster: Sequence[HouseSim],
    policies: Sequence[Policy] | None,
    weather: WeatherTrace,
    days: int,
    dt: int = STEP_MINUTES,
    k: int = DEFAULT_HISTORY,
    noise_std: float = 0.0,
    seed: int | None = None,
) -> dict[int, list[list[Transition]]]:
    """Simulate ``days`` days from minute 0 and return per-house daily episodes.

    ``policies=None`` runs every house under the BAU thermostat.
    """
    if policies is None:
        policies = [bau_policy] * len(cluster)
    return Cluster(cluster, weather, k=k, noise_std=noise_std, seed=seed).run(policies, days, dt)


EPISODE_COLUMNS = (
    "house_id", "day", "step", "minute_of_day", "t_out", "t_room",
    "setpoint", "action", "energy_kwh", "terminal",
)


def episode_rows(logs: Mapping[int, Sequence[Sequence[Transition]]]):
    for house_id in sorted(logs):
        for episode in logs[house_id]:
            for tr in episode:
                yield (
                    house_id, tr.day, tr.step, tr.state.minute_of_day, tr.state.outdoor_temp,
                    tr.state.room_temp, tr.setpoint, int(tr.action), tr.cost, tr.terminal,
                )


def write_episodes_csv(path, logs: Mapping[int, Sequence[Sequence[Transition]]]):
    return write_csv(path, EPISODE_COLUMNS, episode_rows(logs))
