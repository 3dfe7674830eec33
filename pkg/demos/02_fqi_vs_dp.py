"""Fitted Q-iteration against the exact answer on a small tabular house.

The toy MDP snaps temperatures to a grid, so backward induction gives the
exact Q-function of the thermostat policy. FQI on every toy transition should
reproduce it.
"""

import numpy as np

from flexgrid.checks import default_toy, toy_fit_check
from flexgrid.fqi import TabularQ, advantages, dp_oracle, fqi_fit
from flexgrid.mdp import Action, bau_policy

toy = default_toy()
q_dp = dp_oracle(toy)  # (96 steps, bins, 2 actions), kWh to the end of the day
print(f"toy: {toy.n_temps} temperature bins x {toy.horizon} steps; "
      f"Q range {q_dp.min():.2f}..{q_dp.max():.2f} kWh")

res = toy_fit_check(seed=0, toy=toy)
print(f"FQI vs DP: max |dQ| = {res.max_abs_error:.4f} kWh, "
      f"preference sign agreement {res.sign_agreement:.3f} over {res.n_cells} cells, {res.seconds:.1f} s")

# advantage of the non-thermostat action: energy it adds to the day (negative when it saves)
q = fqi_fit(toy.transitions(), iterations=toy.horizon + 1, seed=0,
            regressor_params={"n_estimators": 10, "min_samples_leaf": 1})
states = [toy.state(60, i) for i in range(toy.n_temps)]  # 15:00
sps = [toy.setpoints[60]] * toy.n_temps
other = [Action(1 - bau_policy(s, sp)) for s, sp in zip(states, sps)]
for name, qf in (("fqi", q), ("exact", TabularQ(toy))):
    print(f"{name:>5} A at 15:00:", np.round(advantages(qf, states, sps, other), 3))
