"""Advantage-ranked demand response for a cluster of electrically heated houses.

Modules:
    sim: 1R1C house simulator, weather, setpoint schedules, cluster stepping.
    mdp: state, action and transition types, BAU thermostat, experience buffer.
    fqi: fitted Q-iteration of the BAU policy, advantages, exact toy oracle.
    ranker: per-event rank tables and dis-advantage heatmaps.
    dispatch: minute-level PI tracking, rank-order activation, comfort filter.
    experiment: end-to-end runs, consolidation, reports and manifests.
"""

from .dispatch import (
    DREvent,
    DispatchTrace,
    EventSpec,
    PIController,
    comfort_filter,
    exact_dispatch_oracle,
    pi_update,
    run_dr_event,
    select_activations,
    square_wave_event,
)
from .experiment import ExperimentConfig, consolidate, emit_reports, run_experiment
from .fqi import QFunction, TabularQ, ToyMDP, advantage, dp_oracle, fqi_fit, retrain_all, value
from .mdp import Action, Direction, ExperienceBuffer, HouseholdState, Transition, aggregate_power, bau_policy
from .ranker import RankTable, advantage_heatmap, build_rank_table
from .sim import Cluster, ThermalParams, make_cluster, make_setpoints, make_weather, simulate_period, step_house

__version__ = "0.1.0"
