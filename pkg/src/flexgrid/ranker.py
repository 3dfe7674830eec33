"""Advantage-based household ranking and dis-advantage heatmaps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._io import write_csv
from .fqi import advantages
from .mdp import MINUTES_PER_DAY, STEP_MINUTES, Action, Direction, HouseholdState, bau_policy
from .sim import SetpointSchedule


class RankingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RankEntry:
    house_id: int
    action: Action
    advantage: float
    rank: int
    deviation: bool  # False when the house's BAU action already is the event action


@dataclass(frozen=True)
class RankTable:
    direction: Direction
    entries: tuple[RankEntry, ...]

    @property
    def order(self) -> list[int]:
        return [e.house_id for e in self.entries]

    def rank_of(self, house_id: int) -> int:
        for e in self.entries:
            if e.house_id == house_id:
                return e.rank
        raise KeyError(house_id)

    def entry(self, house_id: int) -> RankEntry:
        return self.entries[self.rank_of(house_id) - 1]


def rank_from_advantages(advs: Mapping[int, float], direction: Direction, deviation: Mapping[int, bool] | None = None) -> RankTable:
    """Order houses by ascending advantage, ties by ascending id."""
    order = sorted(advs, key=lambda h: (advs[h], h))
    entries = tuple(
        RankEntry(h, direction.action, float(advs[h]), r, True if deviation is None else bool(deviation[h]))
        for r, h in enumerate(order, start=1)
    )
    return RankTable(direction, entries)


def build_rank_table(
    qfns: Mapping[int, object],
    states: Mapping[int, HouseholdState],
    setpoints: Mapping[int, float],
    direction: Direction,
) -> RankTable:
    """Rank households for an event by the advantage of the event's action.

    Only houses whose BAU action differs from the event action are evaluated;
    the others deviate at no cost, get advantage 0 and so rank first.
    """
    target = direction.action
    advs, deviates = {}, {}
    for h in sorted(states):
        bau = bau_policy(states[h], setpoints[h])
        deviates[h] = bau != target
        if not deviates[h]:
            advs[h] = 0.0
            continue
        q = qfns.get(h)
        if q is None:
            raise RankingError(f"no fitted Q-function for house {h}")
        advs[h] = float(advantages(q, [states[h]], [setpoints[h]], target)[0])
    return rank_from_advantages(advs, direction, deviates)


RANK_COLUMNS = ("event_id", "house_id", "action", "advantage_kwh", "rank")


def rank_rows(tables: Sequence[tuple[int, RankTable]]):
    for event_id, table in tables:
        for e in table.entries:
            yield event_id, e.house_id, e.action.name, e.advantage, e.rank


def write_rank_csv(path, tables: Sequence[tuple[int, RankTable]]):
    return write_csv(path, RANK_COLUMNS, rank_rows(tables))


@dataclass(frozen=True)
class HeatmapGrid:
    """Dis-advantage of switching ON, A(x, ON) - A(x, OFF), on a time x temperature grid.

    ``values[i, j]`` belongs to ``minutes[i]`` and ``temps[j]``; positive means
    heating now is expected to cost extra energy.
    """

    minutes: np.ndarray
    temps: np.ndarray
    values: np.ndarray
    outdoor_temp: float
    setpoints: np.ndarray  # setpoint per row

    def __post_init__(self):
        if self.values.shape != (len(self.minutes), len(self.temps)):
            raise ValueError("heatmap values do not match its axes")


def heatmap_temps(schedule: SetpointSchedule, day: int, margin: float = 2.0, step: float = 0.1) -> np.ndarray:
    sps = [sp for _, sp in schedule.day(day)]
    lo, hi = min(sps) - margin, max(sps) + margin
    n = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(n), 6)


def advantage_heatmap(
    qfn,
    day: int,
    outdoor_temp: float,
    setpoint_schedule: SetpointSchedule,
    temps: np.ndarray | None = None,
    k: int | None = None,
) -> HeatmapGrid:
    """Evaluate the dis-advantage surface of one household for one day.

    Rows are 15-minute slots, columns room temperatures (default 0.1 degC from
    2 degC below the day's lowest setpoint to 2 degC above its highest). Each
    state replicates the grid temperature over the whole history and freezes
    the outdoor temperature.
    """
    if temps is None:
        temps = heatmap_temps(setpoint_schedule, day)
    temps = np.asarray(temps, dtype=float)
    k = getattr(qfn, "k", 0) if k is None else k
    minutes = np.arange(0, MINUTES_PER_DAY, STEP_MINUTES)
    states, sps = [], []
    for m in minutes:
        sp = setpoint_schedule.at(day, int(m))
        for t in temps:
            states.append(HouseholdState(int(m), float(outdoor_temp), (float(t),) * (k + 1)))
            sps.append(sp)
    a_on = advantages(qfn, states, sps, Action.ON)
    a_off = advantages(qfn, states, sps, Action.OFF)
    values = (a_on - a_off).reshape(len(minutes), len(temps))
    row_sp = np.array([setpoint_schedule.at(day, int(m)) for m in minutes])
    return HeatmapGrid(minutes, temps, values, float(outdoor_temp), row_sp)


def mean_heatmap(grids: Sequence[HeatmapGrid]) -> HeatmapGrid:
    """Cell-wise mean of heatmaps sharing their axes."""
    first = grids[0]
    for g in grids[1:]:
        if not (np.array_equal(g.minutes, first.minutes) and np.array_equal(g.temps, first.temps)):
            raise ValueError("heatmaps must share axes")
    return HeatmapGrid(
        first.minutes,
        first.temps,
        np.mean([g.values for g in grids], axis=0),
        float(np.mean([g.outdoor_temp for g in grids])),
        first.setpoints,
    )


def preference_boundary(grid: HeatmapGrid, threshold: float) -> np.ndarray:
    """Per row, the centroid temperature of the band where switching ON is cheap.

    Cells are weighted by ``max(0, threshold - value)``, so only cells whose
    dis-advantage is below ``threshold`` count. Rows without such cells are NaN.
    """
    w = np.clip(threshold - grid.values, 0.0, None)
    total = w.sum(axis=1)
    out = np.full(len(grid.minutes), np.nan)
    ok = total > 0
    out[ok] = (w[ok] * grid.temps[None, :]).sum(axis=1) / total[ok]
    return out


def write_heatmap_csv(path, grid: HeatmapGrid):
    rows = (
        (int(m), float(t), float(grid.values[i, j]))
        for i, m in enumerate(grid.minutes)
        for j, t in enumerate(grid.temps)
    )
    return write_csv(path, ("minute", "temp_c", "dis_advantage_kwh"), rows)
