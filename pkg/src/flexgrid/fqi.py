"""Per-household policy evaluation by fitted Q-iteration.

The Q-function of a household is the undiscounted rest-of-day energy of taking
an action now and following the BAU thermostat afterwards. It is learned from
logged transitions by regressing the bootstrap targets

    y = g + Q_prev(x', pi_b(x'))        (0 bootstrap on the last step of a day)

with one regressor per action. ``ToyMDP`` + ``dp_oracle`` give the same
quantity exactly by backward induction on a small grid.
"""

from __future__ import annotations

import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np
from sklearn.ensemble import ExtraTreesRegressor
from sklearn.neural_network import MLPRegressor

from ._io import write_csv
from .mdp import (
    MINUTES_PER_DAY,
    STEP_MINUTES,
    Action,
    ExperienceBuffer,
    HouseholdState,
    Transition,
    bau_policy,
)
from .sim import SetpointSchedule, ThermalParams, rc_update

log = logging.getLogger(__name__)

QFN_FORMAT = "flexgrid-qfunction"
QFN_VERSION = 1


class TrainingError(RuntimeError):
    pass


# -- features ---------------------------------------------------------------


def encode_features(
    state: HouseholdState,
    temp_mean: float = 0.0,
    temp_std: float = 1.0,
) -> np.ndarray:
    """[sin(2*pi*m/1440), cos(2*pi*m/1440), T_out, T_r[t-k] .. T_r[t]], temperatures standardized."""
    angle = 2 * np.pi * state.minute_of_day / MINUTES_PER_DAY
    temps = (np.array((state.outdoor_temp,) + state.room_temp_history) - temp_mean) / temp_std
    return np.concatenate(([np.sin(angle), np.cos(angle)], temps))


def encode_states(states: Sequence[HouseholdState], temp_mean: float = 0.0, temp_std: float = 1.0) -> np.ndarray:
    minutes = np.array([s.minute_of_day for s in states], dtype=float)
    temps = np.array([(s.outdoor_temp,) + s.room_temp_history for s in states], dtype=float)
    angle = 2 * np.pi * minutes / MINUTES_PER_DAY
    return np.column_stack([np.sin(angle), np.cos(angle), (temps - temp_mean) / temp_std])


# -- regressors -------------------------------------------------------------


class Regressor(Protocol):
    def fit(self, X: np.ndarray, y: np.ndarray) -> "Regressor": ...

    def predict(self, X: np.ndarray) -> np.ndarray: ...


class TreeRegressor:
    """Extremely randomized trees ensemble (the classical FQI approximator)."""

    def __init__(self, seed: int = 0, n_estimators: int = 50, min_samples_leaf: int = 5):
        self.model = ExtraTreesRegressor(
            n_estimators=n_estimators,
            min_samples_leaf=min_samples_leaf,
            random_state=seed,
            n_jobs=1,
        )

    def fit(self, X, y):
        self.model.fit(X, y)
        return self

    def predict(self, X):
        return self.model.predict(X)


class NetRegressor:
    """Two hidden layers of 64 ReLU units, Adam, early stopping off."""

    def __init__(self, seed: int = 0, hidden: tuple[int, ...] = (64, 64), max_iter: int = 300):
        self.model = MLPRegressor(hidden_layer_sizes=hidden, random_state=seed, max_iter=max_iter)

    def fit(self, X, y):
        self.model.fit(X, y)
        return self

    def predict(self, X):
        return self.model.predict(X)


REGRESSORS: dict[str, Callable[..., Regressor]] = {
    "extra-trees": TreeRegressor,
    "mlp": NetRegressor,
}


def make_regressor(kind: str, seed: int, **params) -> Regressor:
    try:
        factory = REGRESSORS[kind]
    except KeyError:
        raise ValueError(f"unknown regressor {kind!r}; choose from {sorted(REGRESSORS)}") from None
    return factory(seed=seed, **params)


# -- Q-function -------------------------------------------------------------


@dataclass
class QFunction:
    """Two-headed Q-function: one fitted regressor per action."""

    heads: dict[Action, Regressor]
    temp_mean: float
    temp_std: float
    k: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.heads) != {Action.OFF, Action.ON}:
            raise ValueError("QFunction needs a fitted head for both OFF and ON")

    def features(self, states: Sequence[HouseholdState]) -> np.ndarray:
        for s in states:
            if s.k != self.k:
                raise ValueError(f"state history length {s.k + 1} does not match k={self.k}")
        return encode_states(states, self.temp_mean, self.temp_std)

    def q_values(self, states: Sequence[HouseholdState]) -> np.ndarray:
        """Array of shape (n, 2); column ``u`` is Q(x, u)."""
        X = self.features(states)
        return np.column_stack([self.heads[Action.OFF].predict(X), self.heads[Action.ON].predict(X)])

    def __call__(self, state: HouseholdState, action: Action) -> float:
        return float(self.q_values([state])[0, int(action)])


def _bau_index(states: Sequence[HouseholdState], setpoints: Sequence[float]) -> np.ndarray:
    return np.array([int(bau_policy(s, sp)) for s, sp in zip(states, setpoints)])


def values(q, states: Sequence[HouseholdState], setpoints: Sequence[float]) -> np.ndarray:
    qv = q.q_values(states)
    return qv[np.arange(len(states)), _bau_index(states, setpoints)]


def advantages(q, states: Sequence[HouseholdState], setpoints: Sequence[float], action: Action | Sequence[Action]) -> np.ndarray:
    """A(x, u) = Q(x, u) - Q(x, pi_b(x)); exactly zero when ``u`` is the BAU action."""
    qv = q.q_values(states)
    rows = np.arange(len(states))
    u = np.broadcast_to(np.asarray(action, dtype=int), (len(states),))
    return qv[rows, u] - qv[rows, _bau_index(states, setpoints)]


def value(q, state: HouseholdState, setpoint: float) -> float:
    """V(x) := Q(x, pi_b(x))."""
    if q is None:
        raise ValueError("Q-function is not fitted")
    return float(values(q, [state], [setpoint])[0])


def advantage(q, state: HouseholdState, setpoint: float, action: Action) -> float:
    if q is None:
        raise ValueError("Q-function is not fitted")
    return float(advantages(q, [state], [setpoint], action)[0])


# -- fitted Q-iteration -----------------------------------------------------


def _next_setpoints(transitions: Sequence[Transition], setpoints: SetpointSchedule | None) -> np.ndarray:
    if setpoints is None:
        return np.array([tr.next_setpoint for tr in transitions])
    out = []
    for tr in transitions:
        m = tr.next_state.minute_of_day
        day = tr.day + (1 if m <= tr.state.minute_of_day else 0)
        out.append(setpoints.at(day, m))
    return np.array(out)


def _head_seed(seed: int, action: Action) -> int:
    # sklearn wants a uint32 random_state
    return int(np.random.SeedSequence([seed, int(action)]).generate_state(1)[0])


def fqi_fit(
    data: ExperienceBuffer | Iterable[Transition],
    setpoints: SetpointSchedule | None = None,
    iterations: int = 20,
    seed: int = 0,
    regressor: str = "extra-trees",
    regressor_params: Mapping | None = None,
    callback: Callable[[int, QFunction], None] | None = None,
    train_log: list | None = None,
) -> QFunction:
    """Evaluate the BAU policy from logged transitions.

    Iteration 1 regresses the immediate cost; each later iteration regresses
    ``g + Q_prev(x', pi_b(x'))`` with zero bootstrap on terminal transitions
    (undiscounted, daily episodes). ``train_log`` collects
    ``(iteration, train_rmse)`` pairs; ``callback`` sees every intermediate fit.
    """
    transitions = list(data)
    if not transitions:
        raise TrainingError("cannot fit a Q-function on an empty buffer")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    params = dict(regressor_params or {})
    k = transitions[0].state.k

    states = [tr.state for tr in transitions]
    next_states = [tr.next_state for tr in transitions]
    temps = np.array([(s.outdoor_temp,) + s.room_temp_history for s in states], dtype=float)
    if not np.all(np.isfinite(temps)):
        raise TrainingError("non-finite temperatures in training data")
    temp_mean = float(temps.mean())
    temp_std = float(temps.std()) or 1.0

    X = encode_states(states, temp_mean, temp_std)
    Xn = encode_states(next_states, temp_mean, temp_std)
    actions = np.array([int(tr.action) for tr in transitions])
    cost = np.array([tr.cost for tr in transitions], dtype=float)
    live = ~np.array([tr.terminal for tr in transitions])
    next_room = np.array([s.room_temp for s in next_states])
    next_bau = np.where(next_room > _next_setpoints(transitions, setpoints), 0, 1)
    masks = {u: actions == int(u) for u in Action}
    for u, m in masks.items():
        if not m.any():
            raise TrainingError(f"no transitions with action {u.name}; cannot fit that head")

    days = sorted({tr.day for tr in transitions})
    q: QFunction | None = None
    for it in range(1, iterations + 1):
        y = cost.copy()
        if q is not None:
            qn = np.column_stack([q.heads[Action.OFF].predict(Xn), q.heads[Action.ON].predict(Xn)])
            y[live] += qn[live, next_bau[live]]
        heads = {}
        pred = np.empty_like(y)
        for u in Action:
            m = masks[u]
            heads[u] = make_regressor(regressor, seed=_head_seed(seed, u), **params).fit(X[m], y[m])
            pred[m] = heads[u].predict(X[m])
        q = QFunction(
            heads,
            temp_mean,
            temp_std,
            k,
            meta={"first_day": days[0], "last_day": days[-1], "iterations": it, "n_samples": len(transitions)},
        )
        rmse = float(np.sqrt(np.mean((pred - y) ** 2)))
        if train_log is not None:
            train_log.append((it, rmse))
        if callback is not None:
            callback(it, q)
    return q


@dataclass
class RetrainResult:
    qfns: dict[int, QFunction]
    faults: dict[int, str]
    train_log: list[tuple]  # (house_id, iteration, rmse)


def house_seed(seed: int, house_id: int) -> int:
    return int(np.random.SeedSequence([seed, house_id]).generate_state(1)[0])


def retrain_all(
    buffers: Mapping[int, ExperienceBuffer],
    schedules: Mapping[int, SetpointSchedule] | None = None,
    iterations: int = 20,
    seed: int = 0,
    regressor: str = "extra-trees",
    regressor_params: Mapping | None = None,
) -> RetrainResult:
    """Cold-start a fresh Q-function for every household.

    A failing household is reported in ``faults`` and does not stop the others.
    """
    qfns, faults, tlog = {}, {}, []
    for house_id in sorted(buffers):
        hlog: list = []
        try:
            qfns[house_id] = fqi_fit(
                buffers[house_id],
                setpoints=None if schedules is None else schedules.get(house_id),
                iterations=iterations,
                seed=house_seed(seed, house_id),
                regressor=regressor,
                regressor_params=regressor_params,
                train_log=hlog,
            )
        except (TrainingError, ValueError) as exc:
            log.warning("house %s: retraining failed: %s", house_id, exc)
            faults[house_id] = f"{type(exc).__name__}: {exc}"
            continue
        tlog.extend((house_id, it, rmse) for it, rmse in hlog)
    return RetrainResult(qfns, faults, tlog)


def save_qfunction(q: QFunction, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump({"format": QFN_FORMAT, "version": QFN_VERSION, "qfunction": q}, fh, protocol=4)
    return path


def load_qfunction(path) -> QFunction:
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    if not isinstance(blob, dict) or blob.get("format") != QFN_FORMAT:
        raise ValueError(f"{path} is not a serialized Q-function")
    if blob["version"] != QFN_VERSION:
        raise ValueError(f"unsupported Q-function version {blob['version']}")
    return blob["qfunction"]


def write_train_log(path, rows: Iterable[tuple]):
    """rows: (house_id, date, iteration, train_rmse)."""
    return write_csv(path, ("house_id", "date", "iteration", "train_rmse"), rows)


# -- exact oracle -----------------------------------------------------------


@dataclass
class ToyMDP:
    """Finite household MDP on a room-temperature x time-of-day grid.

    Dynamics are the RC update at 15-minute steps under a constant outdoor
    temperature, snapped to the nearest grid temperature. The grid must be
    closed under both actions; a grid covering ``[T_out, T_out + R*P]`` is,
    since forward Euler never overshoots an equilibrium. ``snap_tolerance``
    bounds how far beyond the grid edges a successor may land (default: half
    the grid spacing).
    """

    temps: np.ndarray
    params: ThermalParams
    outdoor_temp: float
    schedule: SetpointSchedule
    horizon: int = MINUTES_PER_DAY // STEP_MINUTES
    costs: tuple[float, float] | None = None
    snap_tolerance: float | None = None
    max_pairs: int = 100_000

    def __post_init__(self):
        self.temps = np.asarray(self.temps, dtype=float)
        if self.temps.ndim != 1 or len(self.temps) == 0 or np.any(np.diff(self.temps) <= 0):
            raise ValueError("temperature grid must be 1-D and strictly increasing")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.horizon * len(self.temps) * 2 > self.max_pairs:
            raise ValueError("toy grid too large for exact enumeration")
        if self.costs is None:
            self.costs = (0.0, self.params.heater_power * STEP_MINUTES / 60.0)
        self.cost = np.asarray(self.costs, dtype=float)
        self.setpoints = np.array([self.schedule.at(0, t * STEP_MINUTES) for t in range(self.horizon)])
        tol = self.snap_tolerance
        if tol is None:
            tol = 0.5 * np.min(np.diff(self.temps)) if len(self.temps) > 1 else 1e-9
        nxt = np.empty((2, len(self.temps)), dtype=int)
        for u in (0, 1):
            succ = rc_update(self.temps, self.outdoor_temp, u, STEP_MINUTES, self.params)
            if np.any(succ < self.temps[0] - tol - 1e-12) or np.any(succ > self.temps[-1] + tol + 1e-12):
                raise ValueError(f"transition under action {u} leaves the temperature grid")
            nxt[u] = np.abs(succ[:, None] - self.temps[None, :]).argmin(axis=1)
        self.next_index = nxt

    @property
    def n_temps(self) -> int:
        return len(self.temps)

    def bau(self, t: int, i) -> np.ndarray:
        return np.where(self.temps[i] > self.setpoints[t], 0, 1)

    def state(self, t: int, i: int) -> HouseholdState:
        return HouseholdState(t * STEP_MINUTES, self.outdoor_temp, (float(self.temps[i]),))

    def transitions(self) -> list[Transition]:
        """Every (state, action) pair of the grid as a logged transition."""
        out = []
        last = self.horizon - 1
        for t in range(self.horizon):
            nt = min(t + 1, last)
            for i in range(self.n_temps):
                for u in Action:
                    j = int(self.next_index[int(u), i])
                    out.append(
                        Transition(
                            state=self.state(t, i),
                            setpoint=float(self.setpoints[t]),
                            action=u,
                            cost=float(self.cost[int(u)]),
                            next_state=HouseholdState(((t + 1) * STEP_MINUTES) % MINUTES_PER_DAY, self.outdoor_temp, (float(self.temps[j]),)),
                            next_setpoint=float(self.setpoints[nt]),
                            terminal=t == last,
                            day=0,
                            step=t,
                        )
                    )
        return out


def dp_oracle(toy: ToyMDP) -> np.ndarray:
    """Exact Q table of the BAU policy, shape (horizon, n_temps, 2)."""
    H, n = toy.horizon, toy.n_temps
    Q = np.zeros((H, n, 2))
    Q[H - 1] = toy.cost[None, :]
    for t in range(H - 2, -1, -1):
        for u in (0, 1):
            j = toy.next_index[u]
            Q[t, :, u] = toy.cost[u] + Q[t + 1, j, toy.bau(t + 1, j)]
    return Q


class TabularQ:
    """Q-function backed by an exact table on a ToyMDP grid (nearest-cell lookup)."""

    def __init__(self, toy: ToyMDP, table: np.ndarray | None = None):
        self.toy = toy
        self.table = dp_oracle(toy) if table is None else table
        self.k = 0

    def q_values(self, states: Sequence[HouseholdState]) -> np.ndarray:
        t = np.array([min(s.minute_of_day // STEP_MINUTES, self.toy.horizon - 1) for s in states])
        temps = np.array([s.room_temp for s in states])
        i = np.abs(temps[:, None] - self.toy.temps[None, :]).argmin(axis=1)
        return self.table[t, i]
