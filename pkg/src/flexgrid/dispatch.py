"""Real-time dispatch of a DR event at 1-minute cadence.

Every minute the dispatcher reads the cluster, runs a PI controller on the
aggregate power error, switches houses to the event action in rank order until
the commanded deviation power is met, and finally passes all actions through
the comfort filter, which nothing can bypass.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._io import write_csv
from .mdp import MINUTES_PER_DAY, Action, Direction, HouseholdState, aggregate_power, bau_policy
from .ranker import RankingError, RankTable, build_rank_table
from .sim import Cluster, ThermalParams, rc_update

COMFORT_BAND = 1.0


@dataclass(frozen=True)
class DREvent:
    """Tracking request: ``target[i]`` is the requested cluster power (kW) at ``start + i``."""

    event_id: int
    start: int  # absolute minute
    duration: int
    target: np.ndarray
    direction: Direction
    baseline: float = float("nan")
    amplitude: float = float("nan")

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("event duration must be positive")
        if len(self.target) != self.duration:
            raise ValueError(f"target has {len(self.target)} samples for a {self.duration}-minute event")

    @property
    def day(self) -> int:
        return self.start // MINUTES_PER_DAY

    @property
    def minute_of_day(self) -> int:
        return self.start % MINUTES_PER_DAY


@dataclass(frozen=True)
class EventSpec:
    """An event whose square-wave target is fixed only when it starts.

    Exactly one of ``amplitude_kw`` and ``amplitude_frac`` (fraction of the
    flexible capacity at the start minute) must be given.
    """

    start: int  # absolute minute
    duration: int
    direction: Direction = Direction.UP
    amplitude_kw: float | None = None
    amplitude_frac: float | None = None
    event_id: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("event duration must be positive")
        if (self.amplitude_kw is None) == (self.amplitude_frac is None):
            raise ValueError("give exactly one of amplitude_kw and amplitude_frac")
        amp = self.amplitude_kw if self.amplitude_kw is not None else self.amplitude_frac
        if amp < 0:
            raise ValueError("amplitude must be non-negative")

    def resolve(self, baseline: float, capacity: float) -> DREvent:
        amp = self.amplitude_kw if self.amplitude_kw is not None else self.amplitude_frac * capacity
        return square_wave_event(self.event_id, self.start, self.duration, baseline, amp, self.direction)


def parse_direction(value) -> Direction:
    if isinstance(value, Direction):
        return value
    try:
        return Direction[str(value).strip().upper()]
    except KeyError:
        raise ValueError(f"unknown event direction {value!r}; expected UP or DOWN") from None


def parse_clock(value) -> int:
    """Minute of day from an int or an ``"HH:MM"`` string."""
    if isinstance(value, str) and ":" in value:
        hh, mm = value.split(":")
        minute = int(hh) * 60 + int(mm)
    else:
        minute = int(value)
    if not 0 <= minute < MINUTES_PER_DAY:
        raise ValueError(f"minute of day out of range: {value!r}")
    return minute


def event_from_dict(data: Mapping, event_id: int = 0, day: int = 0) -> EventSpec:
    """Build an event from ``{start, duration_min, direction, amplitude_kw | amplitude_frac}``.

    ``start`` is a minute of ``day`` (int or ``"HH:MM"``).
    """
    unknown = set(data) - {"start", "duration_min", "direction", "amplitude_kw", "amplitude_frac"}
    if unknown:
        raise ValueError(f"unknown event keys: {sorted(unknown)}")
    return EventSpec(
        start=day * MINUTES_PER_DAY + parse_clock(data["start"]),
        duration=int(data["duration_min"]),
        direction=parse_direction(data.get("direction", "UP")),
        amplitude_kw=None if data.get("amplitude_kw") is None else float(data["amplitude_kw"]),
        amplitude_frac=None if data.get("amplitude_frac") is None else float(data["amplitude_frac"]),
        event_id=event_id,
    )


def load_events(path, day: int = 0) -> list[EventSpec]:
    """Read a YAML or JSON list of event definitions."""
    import yaml  # JSON is a subset of YAML

    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if isinstance(raw, Mapping):
        raw = raw.get("events", [raw])
    return [event_from_dict(d, event_id=i, day=day) for i, d in enumerate(raw)]


def square_wave_event(event_id: int, start: int, duration: int, baseline: float, amplitude: float, direction: Direction) -> DREvent:
    level = baseline + direction.sign * amplitude
    return DREvent(event_id, start, duration, np.full(duration, level), direction, baseline, amplitude)


# Gains for the residual loop around the baseline feed-forward. Any kp > 0
# turns the unavoidable quantization error into minute-scale dithering, so
# only a slow integral remains.
DEFAULT_KP = 0.0
DEFAULT_KI = 0.02  # per minute
QUANTIZERS = ("exceed", "nearest")


@dataclass
class PIController:
    kp: float = DEFAULT_KP
    ki: float = DEFAULT_KI
    lower: float = 0.0
    upper: float = math.inf
    antiwindup: bool = True
    integral: float = 0.0  # kW*min

    def reset(self):
        self.integral = 0.0


def pi_update(ctrl: PIController, error: float, dt: float) -> float:
    """Positional PI law ``c = kp*e + ki*integral(e)``, clamped.

    With anti-windup the integral is not advanced on a step whose output
    would saturate further in the direction of the error.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    candidate = ctrl.integral + error * dt
    raw = ctrl.kp * error + ctrl.ki * candidate
    saturating = (raw > ctrl.upper and error > 0) or (raw < ctrl.lower and error < 0)
    if ctrl.antiwindup and saturating:
        raw = ctrl.kp * error + ctrl.ki * ctrl.integral
    else:
        ctrl.integral = candidate
    return float(min(max(raw, ctrl.lower), ctrl.upper))


def can_deviate(state: HouseholdState, setpoint: float, direction: Direction, band: float = COMFORT_BAND) -> bool:
    """Whether forcing the event action now passes the comfort filter."""
    if direction is Direction.UP:
        return state.room_temp < setpoint + band
    return state.room_temp > setpoint - band


def select_activations(
    rank: RankTable,
    command: float,
    states: Mapping[int, HouseholdState],
    setpoints: Mapping[int, float],
    powers: Mapping[int, float],
    bau_actions: Mapping[int, Action] | None = None,
    band: float = COMFORT_BAND,
    quantizer: str = "nearest",
) -> dict[int, Action]:
    """Walk the rank table and switch a prefix of it to the event action.

    With ``quantizer="exceed"`` the prefix grows until the deviation power it
    adds first meets or exceeds ``command``. With ``"nearest"`` it stops at
    whichever of the two bracketing prefixes lands closer to ``command``
    (ties go to the longer one). A house contributes its heater power only if
    its BAU action differs from the event action and the comfort filter will
    let it deviate.
    """
    if quantizer not in QUANTIZERS:
        raise ValueError(f"unknown quantizer {quantizer!r}")
    if bau_actions is None:
        bau_actions = {h: bau_policy(states[h], setpoints[h]) for h in states}
    out = dict(bau_actions)
    if command <= 0:
        return out
    target = rank.direction.action
    flipped = 0.0
    for h in rank.order:
        if flipped >= command:
            break
        gain = 0.0
        if bau_actions[h] != target and can_deviate(states[h], setpoints[h], rank.direction, band):
            gain = powers[h]
        if quantizer == "nearest" and flipped + gain > command and command - flipped < flipped + gain - command:
            break
        out[h] = target
        flipped += gain
    return out


def comfort_filter(
    proposed: Mapping[int, Action],
    states: Mapping[int, HouseholdState],
    setpoints: Mapping[int, float],
    band: float = COMFORT_BAND,
) -> tuple[dict[int, Action], dict[int, bool]]:
    """Force OFF at or above setpoint+band, ON at or below setpoint-band."""
    actions, flags = {}, {}
    for h, u in proposed.items():
        t, sp = states[h].room_temp, setpoints[h]
        forced = Action.OFF if t >= sp + band else Action.ON if t <= sp - band else u
        actions[h] = forced
        flags[h] = forced != u
    return actions, flags


def flexible_capacity(
    states: Mapping[int, HouseholdState],
    setpoints: Mapping[int, float],
    powers: Mapping[int, float],
    direction: Direction,
    bau_actions: Mapping[int, Action] | None = None,
    band: float = COMFORT_BAND,
) -> float:
    """Heater power of houses that could deviate in ``direction`` right now."""
    if bau_actions is None:
        bau_actions = {h: bau_policy(states[h], setpoints[h]) for h in states}
    return float(
        sum(
            powers[h]
            for h in states
            if bau_actions[h] != direction.action and can_deviate(states[h], setpoints[h], direction, band)
        )
    )


@dataclass
class DispatchTrace:
    """Minute-by-minute record of an event, including pre/post margins.

    ``minutes`` are relative to the event start; rows with ``0 <= minute <
    duration`` are under dispatch, the others run plain BAU.
    """

    event_id: int
    house_ids: list[int]
    duration: int
    start: int = 0  # absolute minute of the event start
    minutes: list[int] = field(default_factory=list)
    target: list[float] = field(default_factory=list)
    achieved: list[float] = field(default_factory=list)
    command: list[float] = field(default_factory=list)
    actions: list[list[int]] = field(default_factory=list)
    room_temps: list[list[float]] = field(default_factory=list)
    setpoints: list[list[float]] = field(default_factory=list)
    overrides: list[list[bool]] = field(default_factory=list)
    rank: RankTable | None = None
    baseline: float = float("nan")
    amplitude: float = float("nan")
    capacity: float = float("nan")

    def log(self, minute, target, achieved, command, actions, temps, sps, flags):
        self.minutes.append(minute)
        self.target.append(float(target))
        self.achieved.append(float(achieved))
        self.command.append(float(command))
        self.actions.append([int(a) for a in actions])
        self.room_temps.append([float(t) for t in temps])
        self.setpoints.append([float(s) for s in sps])
        self.overrides.append([bool(f) for f in flags])

    @property
    def in_event(self) -> np.ndarray:
        m = np.asarray(self.minutes)
        return (m >= 0) & (m < self.duration)

    def tracking_mae(self) -> float:
        mask = self.in_event
        return float(np.mean(np.abs(np.asarray(self.target)[mask] - np.asarray(self.achieved)[mask])))

    def override_count(self) -> int:
        return int(np.sum(self.overrides))

    def comfort_excursion(self, band: float = COMFORT_BAND) -> float:
        """Largest distance (degC) by which any logged room temperature left the band."""
        t = np.asarray(self.room_temps)
        sp = np.asarray(self.setpoints)
        return float(max(0.0, np.max(t - (sp + band)), np.max((sp - band) - t)))

    def rows(self):
        for i, m in enumerate(self.minutes):
            for j, h in enumerate(self.house_ids):
                yield (
                    self.event_id, m, self.target[i], self.achieved[i], h,
                    Action(self.actions[i][j]).name, self.room_temps[i][j], self.overrides[i][j],
                )


TRACE_COLUMNS = ("event_id", "minute", "target_kw", "achieved_kw", "house_id", "action", "room_temp", "override")


def write_traces_csv(path, traces: Sequence[DispatchTrace]):
    return write_csv(path, TRACE_COLUMNS, (row for tr in traces for row in tr.rows()))


def _dispatch_command(ctrl, direction, target, baseline_now, prev_error, feedforward: bool, capacity: float) -> float:
    if not feedforward:
        return pi_update(ctrl, prev_error, 1.0)
    ff = max(0.0, direction.sign * (target - baseline_now))
    correction = pi_update(ctrl, prev_error, 1.0)
    return min(max(ff + correction, 0.0), capacity)


def run_dr_event(
    cluster: Cluster,
    qfns: Mapping[int, object],
    event: DREvent | EventSpec,
    controller: PIController | None = None,
    pre: int = 0,
    post: int = 0,
    rerank: bool = False,
    feedforward: bool = True,
    band: float = COMFORT_BAND,
    quantizer: str = "nearest",
) -> DispatchTrace:
    """Run ``event`` on ``cluster`` starting ``pre`` minutes before it.

    The cluster clock must sit at ``event.start - pre``. Outside the event the
    houses follow their thermostats, re-evaluated every 15 minutes; at the end
    of the event every thermostat is re-evaluated at once (revert to BAU).
    An ``EventSpec`` gets its target at the start minute, from the BAU
    aggregate and the flexible capacity observed then.
    """
    ids = cluster.ids
    missing = [h for h in ids if qfns.get(h) is None]
    if missing:
        raise RankingError(f"refusing to start event {event.event_id}: no Q-function for houses {missing}")
    if cluster.clock != event.start - pre:
        raise ValueError(f"cluster clock {cluster.clock} != event start {event.start} - pre {pre}")
    powers = dict(zip(ids, cluster.powers))
    total_power = sum(powers.values())
    ctrl = controller or PIController()
    if feedforward:
        ctrl.lower, ctrl.upper = -total_power, total_power
    else:
        ctrl.lower, ctrl.upper = 0.0, total_power
    ctrl.reset()

    trace = DispatchTrace(event.event_id, ids, event.duration, start=event.start)
    rank: RankTable | None = None
    prev_error = 0.0
    achieved = float("nan")
    for rel in range(-pre, event.duration + post):
        if rel == event.duration or cluster.clock % 15 == 0:
            cluster.refresh_thermostats()
        states = dict(zip(ids, cluster.states()))
        sps = dict(zip(ids, cluster.setpoints()))
        bau = dict(zip(ids, cluster.held))
        command = 0.0
        if 0 <= rel < event.duration:
            baseline_now = aggregate_power(list(bau.values()), list(powers.values()))
            if rel == 0:
                trace.capacity = flexible_capacity(states, sps, powers, event.direction, bau, band)
                if isinstance(event, EventSpec):
                    event = event.resolve(baseline_now, trace.capacity)
                trace.baseline, trace.amplitude = event.baseline, event.amplitude
            if rank is None or rerank:
                rank = build_rank_table(qfns, states, sps, event.direction)
                if trace.rank is None:
                    trace.rank = rank
            target = float(event.target[rel])
            if rel == 0 and not feedforward:
                prev_error = event.direction.sign * (target - baseline_now)
            command = _dispatch_command(ctrl, event.direction, target, baseline_now, prev_error, feedforward, total_power)
            proposed = select_activations(rank, command, states, sps, powers, bau, band, quantizer)
        else:
            target = trace.baseline
            proposed = bau
        actions, flags = comfort_filter(proposed, states, sps, band)
        acts = [actions[h] for h in ids]
        achieved = aggregate_power(acts, [powers[h] for h in ids])
        if 0 <= rel < event.duration:
            prev_error = event.direction.sign * (target - achieved)
        trace.log(rel, target, achieved, command, acts, [s.room_temp for s in states.values()],
                  [sps[h] for h in ids], [flags[h] for h in ids])
        cluster.step(acts, 1)
    # pre-margin rows were logged before the baseline was known
    for i, m in enumerate(trace.minutes):
        if m < 0:
            trace.target[i] = trace.baseline
    return trace


# -- exhaustive reference for tiny instances --------------------------------


@dataclass
class TinyInstance:
    """A few houses over a short horizon, with actions held over fixed blocks."""

    params: list[ThermalParams]
    initial_temps: list[float]
    setpoints: list[float]
    outdoor_temp: float
    target: np.ndarray  # kW per block
    direction: Direction = Direction.UP
    block: int = 5
    minute_of_day: int = 0  # when the first block starts

    @property
    def n_blocks(self) -> int:
        return len(self.target)


@dataclass
class DispatchSolution:
    actions: np.ndarray  # (houses, blocks)
    objective: float  # kWh of absolute tracking error
    deviations: int  # block-actions differing from BAU along the schedule's own trajectory


def _simulate_blocks(inst: TinyInstance, h: int, schedules: np.ndarray):
    """Vectorised rollout of many action schedules of one house.

    Returns (feasible mask, deviation counts) for ``schedules`` of shape (n, blocks).
    A schedule is feasible when the comfort filter would pass every one of its
    block decisions: never ON at or above setpoint+band, never OFF at or below
    setpoint-band.
    """
    p = inst.params[h]
    sp = inst.setpoints[h]
    temps = np.full(len(schedules), float(inst.initial_temps[h]))
    ok = np.ones(len(schedules), dtype=bool)
    dev = np.zeros(len(schedules), dtype=int)
    for b in range(inst.n_blocks):
        u = schedules[:, b]
        ok &= ~((temps >= sp + COMFORT_BAND) & (u == 1)) & ~((temps <= sp - COMFORT_BAND) & (u == 0))
        dev += u != np.where(temps > sp, 0, 1)
        for _ in range(inst.block):
            temps = rc_update(temps, inst.outdoor_temp, u, 1, p)
    return ok, dev


def bau_schedule(inst: TinyInstance) -> np.ndarray:
    out = np.zeros((len(inst.params), inst.n_blocks), dtype=int)
    for h, p in enumerate(inst.params):
        t = float(inst.initial_temps[h])
        for b in range(inst.n_blocks):
            u = 0 if t > inst.setpoints[h] else 1
            out[h, b] = u
            for _ in range(inst.block):
                t = rc_update(t, inst.outdoor_temp, u, 1, p)
    return out


def schedule_objective(inst: TinyInstance, actions: np.ndarray) -> float:
    powers = np.array([p.heater_power for p in inst.params])
    g = (actions * powers[:, None]).sum(axis=0)
    return float(np.abs(inst.target - g).sum() * inst.block / 60.0)


def exact_dispatch_oracle(inst: TinyInstance, max_space: int = 2**24) -> DispatchSolution:
    """Exhaustive optimum of the block-discretised tracking problem.

    Minimises the summed absolute tracking error over all ON/OFF block
    schedules the comfort filter accepts; ties go to the schedule with fewest
    deviations from the thermostat. Any schedule the heuristic dispatcher
    produces is in that set, so it can never beat this optimum.
    """
    n_h, n_b = len(inst.params), inst.n_blocks
    if n_h > 3:
        raise ValueError("exact oracle handles at most 3 houses")
    if 2 ** (n_h * n_b) > max_space:
        raise ValueError(f"search space 2^{n_h * n_b} exceeds limit {max_space}")
    all_sched = np.array(list(itertools.product((0, 1), repeat=n_b)), dtype=int)
    per_house = []
    for h in range(n_h):
        ok, dev = _simulate_blocks(inst, h, all_sched)
        if not ok.any():
            raise ValueError(f"house {h}: no comfort-feasible schedule")
        per_house.append((all_sched[ok], dev[ok], inst.params[h].heater_power))

    best = (math.inf, math.inf, None)
    scale = inst.block / 60.0

    def search(h, g, dev, chosen):
        nonlocal best
        sched, devs, p = per_house[h]
        g_all = g[None, :] + sched * p
        d_all = dev + devs
        if h == n_h - 1:
            obj = np.abs(inst.target[None, :] - g_all).sum(axis=1) * scale
            key = np.lexsort((d_all, np.round(obj, 9)))
            i = key[0]
            cand = (round(float(obj[i]), 9), int(d_all[i]))
            if cand < best[:2]:
                best = (cand[0], cand[1], chosen + [sched[i]])
            return
        for i in range(len(sched)):
            search(h + 1, g_all[i], d_all[i], chosen + [sched[i]])

    search(0, np.zeros(n_b), 0, [])
    actions = np.array(best[2])
    return DispatchSolution(actions, schedule_objective(inst, actions), int(best[1]))


def heuristic_block_dispatch(
    inst: TinyInstance,
    qfns: Mapping[int, object] | Sequence[object],
    controller: PIController | None = None,
    feedforward: bool = True,
    quantizer: str = "nearest",
) -> DispatchSolution:
    """The rank + PI + comfort-filter dispatcher evaluated on the oracle's block grid."""
    n_h = len(inst.params)
    ids = list(range(n_h))
    if not isinstance(qfns, Mapping):
        qfns = dict(zip(ids, qfns))
    powers = {h: inst.params[h].heater_power for h in ids}
    total = sum(powers.values())
    ctrl = controller or PIController()
    ctrl.lower, ctrl.upper = (-total, total) if feedforward else (0.0, total)
    ctrl.reset()
    temps = [float(t) for t in inst.initial_temps]
    sps = dict(zip(ids, inst.setpoints))
    actions = np.zeros((n_h, inst.n_blocks), dtype=int)
    rank = None
    prev_error = 0.0
    deviations = 0
    for b in range(inst.n_blocks):
        states = {
            h: HouseholdState(
                (inst.minute_of_day + b * inst.block) % MINUTES_PER_DAY,
                inst.outdoor_temp,
                (temps[h],) * (getattr(qfns[h], "k", 0) + 1),
            )
            for h in ids
        }
        bau = {h: bau_policy(states[h], sps[h]) for h in ids}
        if rank is None:
            rank = build_rank_table(qfns, states, sps, inst.direction)
        target = float(inst.target[b])
        baseline_now = aggregate_power([bau[h] for h in ids], [powers[h] for h in ids])
        if feedforward:
            ff = max(0.0, inst.direction.sign * (target - baseline_now))
            command = min(max(ff + pi_update(ctrl, prev_error, inst.block), 0.0), total)
        else:
            err = prev_error if b else inst.direction.sign * (target - baseline_now)
            command = pi_update(ctrl, err, inst.block)
        proposed = select_activations(rank, command, states, sps, powers, bau, quantizer=quantizer)
        final, _ = comfort_filter(proposed, states, sps)
        for h in ids:
            u = int(final[h])
            actions[h, b] = u
            deviations += u != int(bau[h])
            for _ in range(inst.block):
                temps[h] = rc_update(temps[h], inst.outdoor_temp, u, 1, inst.params[h])
        achieved = aggregate_power([final[h] for h in ids], [powers[h] for h in ids])
        prev_error = inst.direction.sign * (target - achieved)
    return DispatchSolution(actions, schedule_objective(inst, actions), deviations)
