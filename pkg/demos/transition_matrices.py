"""
Transition matrices and the stride
==================================

Fit cell-to-cell transition counts from synthetic micro-tubes at two
strides, then threshold them and count pooled regions.
"""

import numpy as np

from amtubes import (ActorSpec, PyramidConfig, ScenarioSpec, build_anchor_grid,
                     fit_transition_set, generate, pooling_plan)
from amtubes.transmat import offdiagonal_mass

rng = np.random.default_rng(0)

# actors drift right by 1/40 of the frame per frame
actors = [ActorSpec(1, (0.2, 0.2), (rng.uniform(0.2, 0.3), rng.uniform(0.1, 0.9)), (0.025, 0.0))
          for _ in range(40)]
spec = ScenarioSpec(actors, n_frames=25, n_classes=1, deltas=(1, 8))
scn = generate(spec)

grid = build_anchor_grid(PyramidConfig.single(5, 1))
for delta in spec.deltas:
    ts = fit_transition_set(scn.annotations[delta], grid).normalized()
    mass, count = offdiagonal_mass(ts[0])
    print(f"delta={delta}: off-diagonal mass {mass:.3f}, off-diagonal entries {count}")

# actors of mixed sizes spread over the full pyramid
actors = [ActorSpec(1, (s, s), tuple(rng.uniform(0.2, 0.8, 2)), tuple(rng.uniform(-0.02, 0.02, 2)))
          for s in rng.uniform(0.05, 0.95, 200)]
scn = generate(ScenarioSpec(actors, n_frames=25, n_classes=1, deltas=(8,)))
cfg = PyramidConfig.default()
ts = fit_transition_set(scn.annotations[8], build_anchor_grid(cfg)).normalized()
for threshold in (0.01, 0.1, 0.3):
    plan = pooling_plan(ts.binarized(threshold), cfg, n_classes=1)
    print(f"threshold {threshold}: M = {plan.M}, per level {plan.per_level}")
