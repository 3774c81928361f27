"""
A crossing in the passageway
============================

Simulate one synthetic run and look at what the force model does to a
pedestrian: where it goes and which force term dominates on the way.
"""

import numpy as np

from sfmgnet.datasets import SyntheticConfig, simulate_run
from sfmgnet.sim import SfmgParams

# one 30 s run; the run number picks the scene, the seed the whole corpus
ds = simulate_run(SyntheticConfig(seed=0), SfmgParams(), run=3)
print(f"{ds.name}: {len(ds.trajectories)} pedestrians, {len(ds.groups)} group(s), dt {ds.dt} s")

for g in ds.groups:
    print(f"  group {g.id}: members {g.member_ids}, leader {g.leader_id}")

# the recorded breakdown holds acceleration, obstacle, pedestrian, group and total
names = ["acceleration", "obstacle", "pedestrian", "group"]
for aid, tr in ds.trajectories.items():
    F = np.hypot(*ds.forces[aid][..., :4, :].transpose(2, 0, 1))  # (T, 4) magnitudes
    top = names[int(np.argmax(F.mean(axis=0)))]
    start, end = tr.positions[0], tr.positions[-1]
    left = np.hypot(*(end - ds.destinations[aid]))
    print(f"  ped {aid}: {len(tr) * ds.dt:4.1f} s in scene, "
          f"({start[0]:5.1f},{start[1]:5.1f}) -> ({end[0]:5.1f},{end[1]:5.1f}), "
          f"{left:.2f} m from goal, mostly {top}")

# closest approach between any two pedestrians over the run
ids, k0, table = ds.dense()
gap = np.inf
for i in range(len(ids)):
    for j in range(i + 1, len(ids)):
        d = np.hypot(*(table[i] - table[j]).T)
        if np.any(~np.isnan(d)):
            gap = min(gap, np.nanmin(d))
print(f"closest approach {gap:.2f} m")
