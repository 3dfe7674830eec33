"""Simulate the default 8-house cluster under plain thermostat control.

Each house is a first-order RC model heated by an on/off heater. The
thermostat decides every 15 minutes: heat when the room is at or below the
setpoint. Half of the houses raise their setpoint in the evening.
"""

import numpy as np

from flexgrid.mdp import bau_policy
from flexgrid.sim import Cluster, make_cluster, make_weather

houses = make_cluster(8, seed=0)
for h in houses:
    p = h.params
    print(f"house {p.house_id}: R={p.resistance:.2f} K/kW  C={p.capacitance:.2f} kWh/K  "
          f"P={p.heater_power:.2f} kW  setpoints={h.schedule.breakpoints}")

weather = make_weather(0, days=3, resolution=1)
cluster = Cluster(houses, weather, noise_std=0.02, seed=0)
logs = cluster.run([bau_policy] * len(houses), days=2)

# one episode is one day of 96 quarter-hour transitions
ep = logs[1][0]
temps = np.array([tr.state.room_temp for tr in ep])
print(f"\nhouse 1, day 0: {len(ep)} transitions, room {temps.min():.2f}..{temps.max():.2f} degC, "
      f"{sum(tr.cost for tr in ep):.1f} kWh")

# aggregate heater power over the second day, hour by hour
power = np.zeros(96)
for h, episodes in logs.items():
    power += [tr.action * houses[h - 1].params.heater_power for tr in episodes[1]]
print("cluster kW per hour:", np.round(power.reshape(24, 4).mean(axis=1), 1))
