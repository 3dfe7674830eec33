"""Household MDP vocabulary: states, actions, costs and the thermostat policy.

Each household is a partially observable MDP whose state is the time of day,
the outdoor temperature and a short history of room temperatures sampled on a
15-minute stride. The business-as-usual (BAU) policy is a bang-bang thermostat.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

STEP_MINUTES = 15
MINUTES_PER_DAY = 1440
STEPS_PER_DAY = MINUTES_PER_DAY // STEP_MINUTES
DEFAULT_HISTORY = 4


class Action(enum.IntEnum):
    OFF = 0
    ON = 1


class Direction(enum.Enum):
    """Direction of a demand-response event."""

    UP = "up"
    DOWN = "down"

    @property
    def action(self) -> Action:
        """The action a household is pushed to during an event of this direction."""
        return Action.ON if self is Direction.UP else Action.OFF

    @property
    def sign(self) -> int:
        return 1 if self is Direction.UP else -1


@dataclass(frozen=True)
class HouseholdState:
    """Observable state of one household.

    ``room_temp_history`` holds k+1 room temperatures, oldest first; the last
    entry is the current room temperature.
    """

    minute_of_day: int
    outdoor_temp: float
    room_temp_history: tuple[float, ...]

    def __post_init__(self):
        if not 0 <= self.minute_of_day < MINUTES_PER_DAY:
            raise ValueError(f"minute_of_day out of range: {self.minute_of_day}")
        if len(self.room_temp_history) == 0:
            raise ValueError("room_temp_history must hold at least the current temperature")
        if not np.isfinite(self.outdoor_temp) or not np.all(np.isfinite(self.room_temp_history)):
            raise ValueError("state temperatures must be finite")

    @property
    def room_temp(self) -> float:
        return self.room_temp_history[-1]

    @property
    def k(self) -> int:
        return len(self.room_temp_history) - 1


@dataclass(frozen=True)
class Transition:
    """One logged 15-minute step of a household.

    ``day`` and ``step`` timestamp the transition; ``next_setpoint`` is the
    setpoint in force at ``next_state`` and is what the BAU policy is evaluated
    against when bootstrapping.
    """

    state: HouseholdState
    setpoint: float
    action: Action
    cost: float
    next_state: HouseholdState
    next_setpoint: float
    terminal: bool
    day: int = 0
    step: int = 0

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError(f"negative cost: {self.cost}")


def bau_policy(state: HouseholdState, setpoint: float) -> Action:
    """Thermostat rule: heat iff the room is at or below its setpoint."""
    return Action.OFF if state.room_temp > setpoint else Action.ON


def step_cost(action: Action, heater_power: float, dt: float) -> float:
    """Energy in kWh drawn over ``dt`` minutes."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return int(action) * heater_power * dt / 60.0


def aggregate_power(actions: Sequence[Action], powers: Sequence[float]) -> float:
    """Instantaneous cluster consumption in kW."""
    if len(actions) != len(powers):
        raise ValueError(f"{len(actions)} actions for {len(powers)} heaters")
    return float(sum(int(a) * p for a, p in zip(actions, powers)))


class ExperienceBuffer:
    """Rolling per-household store of the last ``window_days`` days of transitions."""

    def __init__(self, window_days: int = 30, steps_per_day: int = STEPS_PER_DAY):
        if window_days < 1:
            raise ValueError("window_days must be >= 1")
        self.window_days = window_days
        self.steps_per_day = steps_per_day
        self._items: deque[Transition] = deque()

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    @property
    def transitions(self) -> list[Transition]:
        return list(self._items)

    @property
    def days(self) -> list[int]:
        return sorted({tr.day for tr in self._items})

    def push(self, transitions: Iterable[Transition]) -> "ExperienceBuffer":
        new = list(transitions)
        if not new:
            return self
        last = (self._items[-1].day, self._items[-1].step) if self._items else None
        for tr in new:
            key = (tr.day, tr.step)
            if last is not None and key <= last:
                raise ValueError(f"transition at {key} is not after {last}")
            last = key
        self._items.extend(new)
        oldest_kept = self._items[-1].day - self.window_days + 1
        while self._items and self._items[0].day < oldest_kept:
            self._items.popleft()
        return self


def push_transitions(buffer: ExperienceBuffer, transitions: Iterable[Transition]) -> ExperienceBuffer:
    return buffer.push(transitions)
