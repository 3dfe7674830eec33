"""End-to-end experiment: BAU warm-up, daily retraining, scheduled DR events.

``run_experiment`` writes every artifact into one directory and finishes with
``emit_reports`` and a manifest of content hashes. Reports are rebuilt from the
CSV artifacts alone, so ``emit_reports`` can be re-run on any finished run.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import zlib
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from ._io import read_csv, sha256_file, write_csv
from .dispatch import (
    COMFORT_BAND,
    DEFAULT_KI,
    DEFAULT_KP,
    QUANTIZERS,
    DispatchTrace,
    EventSpec,
    PIController,
    parse_clock,
    parse_direction,
    run_dr_event,
    write_traces_csv,
)
from .fqi import QFunction, load_qfunction, retrain_all, save_qfunction, write_train_log
from .mdp import MINUTES_PER_DAY, STEP_MINUTES, Action, ExperienceBuffer, Transition, bau_policy, step_cost
from .ranker import advantage_heatmap, write_heatmap_csv, write_rank_csv
from .sim import (
    Cluster,
    ConfigError,
    HouseSim,
    SetpointSchedule,
    ThermalParams,
    make_cluster,
    make_weather,
    write_episodes_csv,
)

log = logging.getLogger(__name__)

ASSUMPTIONS = (
    "event amplitude and schedule are not given by the source; defaults are 10:00 and 15:00 upward square waves",
    "amplitude_frac is relative to the flexible capacity observed at the event start",
    "days are homogeneous; no weekday or weekend calendar",
    "eval-day transitions overlapping an event or with a mid-interval action change are not added to the buffer",
)


class ExperimentError(RuntimeError):
    """A failure inside one experiment phase; ``phase`` names it."""

    def __init__(self, phase: str, message: str):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase


class ReportError(RuntimeError):
    pass


def substream(seed: int, name: str) -> int:
    """Independent child seed for a named consumer of randomness."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_houses: int = 8
    warmup_days: int = 30
    eval_days: int = 10
    window_days: int = 30
    noise_std: float = 0.02
    k: int = 4
    profiles: list[str] | None = None
    bases: list[float] | None = None
    weather: dict = field(default_factory=dict)  # extra make_weather keywords
    event_starts: list = field(default_factory=lambda: ["10:00", "15:00"])
    event_duration_min: int = 40
    event_direction: str = "UP"
    amplitude_frac: float | None = 0.5
    amplitude_kw: float | None = None
    pre_margin: int = 15
    post_margin: int = 15
    fqi_iterations: int = 20
    regressor: str = "extra-trees"
    regressor_params: dict = field(default_factory=dict)
    kp: float = DEFAULT_KP
    ki: float = DEFAULT_KI
    quantizer: str = "nearest"
    feedforward: bool = True
    rerank: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        self.validate()

    @property
    def events_per_day(self) -> int:
        return len(self.event_starts)

    def validate(self):
        if self.n_houses < 1:
            raise ConfigError("n_houses must be >= 1")
        if self.eval_days < 0 or self.warmup_days < 1:
            raise ConfigError("need warmup_days >= 1 and eval_days >= 0")
        if self.warmup_days < self.window_days:
            raise ConfigError(f"warmup_days ({self.warmup_days}) must cover the buffer window ({self.window_days})")
        if self.event_duration_min <= 0:
            raise ConfigError("event_duration_min must be positive")
        if (self.amplitude_frac is None) == (self.amplitude_kw is None):
            raise ConfigError("set exactly one of amplitude_frac and amplitude_kw")
        parse_direction(self.event_direction)
        if self.quantizer not in QUANTIZERS:
            raise ConfigError(f"quantizer must be one of {QUANTIZERS}")
        windows = sorted(self.event_windows())
        for lo, hi in windows:
            if lo < 0 or hi > MINUTES_PER_DAY:
                raise ConfigError(f"event window [{lo}, {hi}) leaves the day")
        for (_, hi), (lo, _) in zip(windows, windows[1:]):
            if lo < hi:
                raise ConfigError("event windows (with margins) overlap")

    def event_windows(self) -> list[tuple[int, int]]:
        """[start - pre, end + post) per daily event, in minutes of day."""
        out = []
        for s in self.event_starts:
            m = parse_clock(s)
            out.append((m - self.pre_margin, m + self.event_duration_min + self.post_margin))
        return out

    def event_specs(self, day: int, first_id: int) -> list[EventSpec]:
        direction = parse_direction(self.event_direction)
        return [
            EventSpec(
                start=day * MINUTES_PER_DAY + parse_clock(s),
                duration=self.event_duration_min,
                direction=direction,
                amplitude_kw=self.amplitude_kw,
                amplitude_frac=None if self.amplitude_kw is not None else self.amplitude_frac,
                event_id=first_id + i,
            )
            for i, s in enumerate(sorted(self.event_starts, key=parse_clock))
        ]

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path}: expected a mapping at top level")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ConsolidatedResponse:
    minutes: np.ndarray
    median: np.ndarray
    std: np.ndarray
    target: np.ndarray
    count: int


def consolidate(traces: Sequence[DispatchTrace], relative: bool = False) -> ConsolidatedResponse:
    """Median and population std of achieved power per event-relative minute.

    With ``relative`` each trace is shifted by its own baseline first, which
    lines up events that started from different BAU levels.
    """
    if not traces:
        raise ValueError("cannot consolidate an empty list of traces")
    minutes = traces[0].minutes
    for tr in traces[1:]:
        if tr.minutes != minutes:
            raise ValueError("traces must share duration and margins")
    shift = np.array([tr.baseline if relative else 0.0 for tr in traces])[:, None]
    achieved = np.array([tr.achieved for tr in traces]) - shift
    target = np.array([tr.target for tr in traces]) - shift
    return ConsolidatedResponse(
        np.asarray(minutes),
        np.median(achieved, axis=0),
        np.std(achieved, axis=0),
        np.median(target, axis=0),
        len(traces),
    )


def comfort_excursion(
    temps: np.ndarray, setpoints: np.ndarray, band: float = COMFORT_BAND, exclude_recovery: bool = True
) -> float:
    """Largest excursion (degC) beyond setpoint +/- band over (minutes, houses) arrays.

    With ``exclude_recovery`` a house is ignored from a setpoint change until
    its temperature first re-enters the band: that gap is caused by the
    occupant's schedule, not by control.
    """
    temps = np.asarray(temps, dtype=float)
    setpoints = np.asarray(setpoints, dtype=float)
    over = np.maximum(temps - (setpoints + band), (setpoints - band) - temps)
    if exclude_recovery:
        over = over.copy()
        for h in range(temps.shape[1]):
            recovering = False
            for t in range(temps.shape[0]):
                if t and setpoints[t, h] != setpoints[t - 1, h]:
                    recovering = True
                if recovering and over[t, h] <= 0:
                    recovering = False
                if recovering:
                    over[t, h] = 0.0
    return float(max(0.0, over.max())) if over.size else 0.0


def _date(weather, day: int) -> str:
    return (weather.start + timedelta(days=day)).date().isoformat()


def _run_eval_day(
    cluster: Cluster,
    qfns: Mapping[int, QFunction],
    events: Sequence[EventSpec],
    cfg: ExperimentConfig,
) -> tuple[dict[int, list[Transition]], list[DispatchTrace], np.ndarray, np.ndarray]:
    """Simulate one day at 1-minute resolution from midnight.

    Houses follow their thermostats (re-evaluated every 15 minutes) except
    during events. Returns the 15-minute transitions fit for training, the
    dispatch traces, and per-minute room temperatures and setpoints.
    """
    day = cluster.day
    n = len(cluster)
    day_end = (day + 1) * MINUTES_PER_DAY
    starts = {ev.start - cfg.pre_margin: ev for ev in events}
    transitions: dict[int, list[Transition]] = {h: [] for h in cluster.ids}
    traces: list[DispatchTrace] = []
    temps, sps = [], []

    interval_start = None  # (states, setpoints, actions seen, disturbed)
    seen: list[set] = [set() for _ in range(n)]
    disturbed = False

    def close_interval():
        states0, sps0 = interval_start
        nxt, nsp = cluster.states(), cluster.setpoints()
        step = (cluster.clock - day * MINUTES_PER_DAY) // STEP_MINUTES - 1
        for i, h in enumerate(cluster.ids):
            if disturbed or len(seen[i]) != 1:
                continue
            u = next(iter(seen[i]))
            transitions[h].append(
                Transition(
                    state=states0[i], setpoint=sps0[i], action=u,
                    cost=step_cost(u, cluster.powers[i], STEP_MINUTES),
                    next_state=nxt[i], next_setpoint=nsp[i],
                    terminal=cluster.clock == day_end, day=day, step=step,
                )
            )

    while cluster.clock < day_end:
        if cluster.clock % STEP_MINUTES == 0:
            if interval_start is not None:
                close_interval()
            interval_start = (cluster.states(), cluster.setpoints())
            seen = [set() for _ in range(n)]
            disturbed = False
        ev = starts.get(cluster.clock)
        if ev is not None:
            trace = run_dr_event(
                cluster, qfns, ev,
                controller=PIController(kp=cfg.kp, ki=cfg.ki),
                pre=cfg.pre_margin, post=cfg.post_margin,
                rerank=cfg.rerank, feedforward=cfg.feedforward, quantizer=cfg.quantizer,
            )
            traces.append(trace)
            temps.extend(trace.room_temps)
            sps.extend(trace.setpoints)
            # intervals touched by the event window are not used for training
            disturbed = True
            if cluster.clock % STEP_MINUTES:
                continue
            close_interval()
            interval_start = None
            continue
        if cluster.clock % STEP_MINUTES == 0:
            cluster.refresh_thermostats()
        acts = list(cluster.held)
        for i, u in enumerate(acts):
            seen[i].add(Action(u))
        temps.append([hs.room_temp for hs in cluster.houses])
        sps.append(cluster.setpoints())
        cluster.step(acts, 1)
    if interval_start is not None:
        close_interval()
    return transitions, traces, np.array(temps), np.array(sps)


def run_experiment(config: ExperimentConfig, out_dir=None) -> Path:
    """Run warm-up and evaluation phases, then write reports and the manifest.

    Raises ``ExperimentError`` tagged with the failing phase; artifacts written
    before the failure are kept.
    """
    cfg = config
    out = Path(out_dir or cfg.out_dir or "flexgrid-run")
    out.mkdir(parents=True, exist_ok=True)
    total_days = cfg.warmup_days + cfg.eval_days

    phase = "setup"
    try:
        weather = make_weather(substream(cfg.seed, "weather"), total_days, resolution=1, **cfg.weather)
        houses = make_cluster(cfg.n_houses, substream(cfg.seed, "params") % 2**31, cfg.profiles, cfg.bases)
        cluster = Cluster(houses, weather, k=cfg.k, noise_std=cfg.noise_std, seed=substream(cfg.seed, "noise"))
        _write_run_json(out / "run.json", cfg, houses, weather)

        phase = "warmup"
        logs = cluster.run([bau_policy] * len(houses), cfg.warmup_days)
        buffers = {h: ExperienceBuffer(cfg.window_days) for h in cluster.ids}
        for h, episodes in logs.items():
            for ep in episodes:
                buffers[h].push(ep)

        eval_logs: dict[int, list[list[Transition]]] = {h: [] for h in cluster.ids}
        traces: list[DispatchTrace] = []
        rank_tables = []
        train_rows = []
        temps_all, sps_all = [], []
        qfns: dict[int, QFunction] = {}
        reg_seed = substream(cfg.seed, "regressor")
        for e in range(cfg.eval_days):
            day = cfg.warmup_days + e
            date = _date(weather, day)
            phase = f"retrain day {day}"
            result = retrain_all(
                buffers, {h.house_id: h.schedule for h in houses},
                iterations=cfg.fqi_iterations, seed=reg_seed + day,
                regressor=cfg.regressor, regressor_params=cfg.regressor_params,
            )
            if result.faults:
                raise ExperimentError(phase, f"households failed to train: {result.faults}")
            for h, q in result.qfns.items():
                if q.meta["last_day"] >= day:
                    raise ExperimentError(phase, f"house {h} trained on data from day {q.meta['last_day']}")
                save_qfunction(q, out / "models" / f"qfn_{h}_{date}.pkl")
            qfns = result.qfns
            train_rows.extend((h, date, it, rmse) for h, it, rmse in result.train_log)

            phase = f"evaluate day {day}"
            events = cfg.event_specs(day, first_id=e * cfg.events_per_day)
            day_tr, day_traces, temps, sps = _run_eval_day(cluster, qfns, events, cfg)
            for h, trs in day_tr.items():
                buffers[h].push(trs)
                eval_logs[h].append(trs)
            traces.extend(day_traces)
            rank_tables.extend((tr.event_id, tr.rank) for tr in day_traces)
            temps_all.append(temps)
            sps_all.append(sps)

        phase = "write"
        for h in logs:
            logs[h].extend(eval_logs[h])
        write_episodes_csv(out / "episodes.csv", logs)
        if cfg.eval_days:
            write_train_log(out / "train_log.csv", train_rows)
            write_rank_csv(out / "rank_events.csv", rank_tables)
        write_traces_csv(out / "dispatch_traces.csv", traces)
        _write_events_csv(out / "events.csv", traces, weather)
        bau_excursion = (
            comfort_excursion(np.vstack(temps_all), np.vstack(sps_all)) if temps_all else 0.0
        )
        _update_run_json(out / "run.json", {"eval_comfort_excursion_c": round(bau_excursion, 6)})

        phase = "report"
        emit_reports(out)
        write_manifest(out, cfg)
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(phase, f"{type(exc).__name__}: {exc}") from exc
    return out


def _write_run_json(path: Path, cfg: ExperimentConfig, houses: Sequence[HouseSim], weather) -> None:
    total = cfg.warmup_days + cfg.eval_days
    noon = [weather.at(d * MINUTES_PER_DAY + 720) for d in range(total)]
    data = {
        "start": weather.start.isoformat(),
        "warmup_days": cfg.warmup_days,
        "eval_days": cfg.eval_days,
        "noon_outdoor_c": [round(t, 6) for t in noon],
        "houses": [
            {
                "house_id": h.house_id,
                "resistance": h.params.resistance,
                "capacitance": h.params.capacitance,
                "heater_power": h.params.heater_power,
                "schedule": h.schedule.to_dict(),
            }
            for h in houses
        ],
    }
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _update_run_json(path: Path, extra: Mapping) -> None:
    data = json.loads(path.read_text())
    data.update(extra)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


EVENT_COLUMNS = (
    "event_id", "date", "start_minute", "duration_min", "direction",
    "baseline_kw", "amplitude_kw", "flexible_capacity_kw",
)


def _write_events_csv(path, traces: Sequence[DispatchTrace], weather) -> Path:
    rows = []
    for tr in traces:
        start_abs = tr.start
        rows.append((
            tr.event_id, _date(weather, start_abs // MINUTES_PER_DAY), start_abs % MINUTES_PER_DAY,
            tr.duration, tr.rank.direction.name, tr.baseline, tr.amplitude, tr.capacity,
        ))
    return write_csv(path, EVENT_COLUMNS, rows)


def _load_traces(run: Path) -> tuple[list[dict], dict[int, dict]]:
    """Per event: minutes, target and achieved arrays rebuilt from the trace CSV."""
    events = {int(r["event_id"]): r for r in read_csv(run / "events.csv")}
    per_event: dict[int, dict] = {}
    for r in read_csv(run / "dispatch_traces.csv"):
        ev = per_event.setdefault(int(r["event_id"]), {"rows": {}, "temps": {}, "overrides": 0})
        m = int(r["minute"])
        ev["rows"].setdefault(m, (float(r["target_kw"]), float(r["achieved_kw"])))
        ev["temps"].setdefault(m, {})[int(r["house_id"])] = float(r["room_temp"])
        ev["overrides"] += int(r["override"])
    out = []
    for eid in sorted(per_event):
        ev = per_event[eid]
        minutes = sorted(ev["rows"])
        out.append({
            "event_id": eid,
            "minutes": minutes,
            "target": np.array([ev["rows"][m][0] for m in minutes]),
            "achieved": np.array([ev["rows"][m][1] for m in minutes]),
            "temps": ev["temps"],
            "overrides": ev["overrides"],
        })
    return out, events


def event_mae(minutes: Sequence[int], target: np.ndarray, achieved: np.ndarray, duration: int) -> float:
    m = np.asarray(minutes)
    mask = (m >= 0) & (m < duration)
    return float(np.mean(np.abs(target[mask] - achieved[mask])))


def emit_reports(run_dir) -> list[Path]:
    """Rebuild report files from a run's artifacts.

    Writes ``consolidated_response.csv`` (when there are events),
    ``heatmap_<id>.csv`` per household with a trained model, and
    ``summary.txt``. Raises ``ReportError`` listing any missing inputs.
    """
    run = Path(run_dir)
    required = ["run.json", "events.csv", "dispatch_traces.csv", "episodes.csv"]
    meta_path = run / "run.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta["eval_days"]:
            required += ["rank_events.csv", "train_log.csv"]
    missing = [name for name in required if not (run / name).exists()]
    if missing:
        raise ReportError(f"{run}: missing artifacts: {', '.join(missing)}")

    written = []
    events_data, events = _load_traces(run)
    houses = {h["house_id"]: h for h in meta["houses"]}
    lines = [f"events: {len(events_data)}"]

    if events_data:
        durations = {int(events[e["event_id"]]["duration_min"]) for e in events_data}
        if len(durations) != 1 or len({tuple(e["minutes"]) for e in events_data}) != 1:
            raise ReportError("events differ in duration or margins; cannot consolidate")
        duration = durations.pop()
        fake = [
            DispatchTrace(e["event_id"], [], duration, minutes=list(e["minutes"]), target=list(e["target"]),
                          achieved=list(e["achieved"]), baseline=float(events[e["event_id"]]["baseline_kw"]))
            for e in events_data
        ]
        absolute, rel = consolidate(fake), consolidate(fake, relative=True)
        written.append(write_csv(
            run / "consolidated_response.csv",
            ("minute", "target_kw", "median_kw", "std_kw", "target_dev_kw", "median_dev_kw", "std_dev_kw", "n_events"),
            (
                (int(m), float(absolute.target[i]), float(absolute.median[i]), float(absolute.std[i]),
                 float(rel.target[i]), float(rel.median[i]), float(rel.std[i]), absolute.count)
                for i, m in enumerate(absolute.minutes)
            ),
        ))
        lines.append("event_id date start_minute amplitude_kw mae_kw mae_frac overrides comfort_excursion_c")
        worst = 0.0
        for e in events_data:
            ev = events[e["event_id"]]
            mae = event_mae(e["minutes"], e["target"], e["achieved"], duration)
            amp = float(ev["amplitude_kw"])
            frac = mae / amp if amp > 0 else float("nan")
            day = _day_index(meta, ev["date"])
            start = int(ev["start_minute"])
            exc = 0.0
            for m, temps in e["temps"].items():
                for h, t in temps.items():
                    sp = SetpointSchedule.from_dict(houses[h]["schedule"]).at(day, start + m)
                    exc = max(exc, t - (sp + COMFORT_BAND), (sp - COMFORT_BAND) - t)
            worst = max(worst, exc)
            lines.append(f"{e['event_id']} {ev['date']} {start} {amp:.6g} {mae:.6g} {frac:.6g} {e['overrides']} {exc:.6g}")
        maes = [event_mae(e["minutes"], e["target"], e["achieved"], duration) for e in events_data]
        lines.append(f"mean_mae_kw: {np.mean(maes):.6g}")
        lines.append(f"total_overrides: {sum(e['overrides'] for e in events_data)}")
        lines.append(f"comfort_excursion_max_c: {worst:.6g}")
    else:
        lines.append("no DR events were run; consolidated_response.csv not written")
    if "eval_comfort_excursion_c" in meta:
        lines.append(f"eval_day_comfort_excursion_max_c (setpoint-step recovery excluded): {meta['eval_comfort_excursion_c']:.6g}")

    written.extend(_emit_heatmaps(run, meta))
    summary = run / "summary.txt"
    summary.write_text("\n".join(lines) + "\n")
    written.append(summary)
    return written


def _day_index(meta: Mapping, date: str) -> int:
    from datetime import date as _d

    return (_d.fromisoformat(date) - _d.fromisoformat(meta["start"][:10])).days


def _emit_heatmaps(run: Path, meta: Mapping) -> list[Path]:
    """One heatmap per household from its most recent model, on that model's day.

    The outdoor temperature is frozen at that day's 12:00 reading.
    """
    out = []
    models = sorted((run / "models").glob("qfn_*.pkl")) if (run / "models").exists() else []
    latest: dict[int, Path] = {}
    for p in models:
        _, h, _date_str = p.stem.split("_", 2)
        latest[int(h)] = p  # sorted by date within a house id
    for h, path in sorted(latest.items()):
        q = load_qfunction(path)
        day = _day_index(meta, path.stem.split("_", 2)[2])
        sched = SetpointSchedule.from_dict({hh["house_id"]: hh for hh in meta["houses"]}[h]["schedule"])
        grid = advantage_heatmap(q, day, meta["noon_outdoor_c"][day], sched)
        out.append(write_heatmap_csv(run / f"heatmap_{h}.csv", grid))
    return out


def write_manifest(run_dir, cfg: ExperimentConfig) -> Path:
    """Config, seed, assumptions and sha256 of every artifact; no timestamps."""
    run = Path(run_dir)
    files = sorted(p for p in run.rglob("*") if p.is_file() and p.name != "manifest.json")
    cfg_dict = cfg.to_dict()
    cfg_dict.pop("out_dir", None)
    data = {
        "config": cfg_dict,
        "seed": cfg.seed,
        "assumptions": list(ASSUMPTIONS),
        "artifacts": {str(p.relative_to(run)): sha256_file(p) for p in files},
    }
    path = run / "manifest.json"
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path
