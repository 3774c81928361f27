"""
Guessing where someone is heading
=================================

Feed 1.2 s of a walker's track to the interacting multiple model filter and
compare its most probable goal with the destination the simulator used.
"""

import numpy as np

from sfmgnet.datasets import SyntheticConfig, simulate_run
from sfmgnet.goal_imm import GoalEstimator, ImmConfig, generate_hypotheses
from sfmgnet.sim import SfmgParams

ds = simulate_run(SyntheticConfig(seed=0), SfmgParams(), run=1000)
aid, tr = next(iter(ds.trajectories.items()))
goal = ds.destinations[aid]

est = GoalEstimator()
for j in sorted({12, len(tr) // 2, len(tr) - 1}):
    w = tr.positions[j - 12:j + 1]  # 13 samples = 1.2 s at 0.1 s
    hyps = generate_hypotheses(w, ds.dt, ImmConfig())
    g = est.goal(w, ds.dt)
    true_dir = (goal - w[-1]) / np.hypot(*(goal - w[-1]))
    got = est.direction(w, ds.dt)
    err = np.degrees(np.arccos(np.clip(got @ true_dir, -1, 1))) if got.any() else float("nan")
    print(f"t={j * ds.dt:4.1f} s: {len(hyps)} hypotheses, MAP goal ({g[0]:5.1f},{g[1]:5.1f}), "
          f"true ({goal[0]:5.1f},{goal[1]:5.1f}), direction error {err:.1f} deg")
