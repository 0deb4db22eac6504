"""
HMM reference on a 4x4 grid
===========================

Learn transitions with Baum-Welch on ground-truth tracks and compare the
row-wise argmax against the counting estimate.
"""

import numpy as np

from amtubes import (ActorSpec, HmmModel, PyramidConfig, ScenarioSpec, build_anchor_grid, em_fit,
                     fit_transition_set, generate)

rng = np.random.default_rng(0)
grid = build_anchor_grid(PyramidConfig.single(4, 1))

# movers cross one cell per frame; a few actors stay put on the right
movers = [ActorSpec(1, (0.25, 0.25), (rng.uniform(0.125, 0.2), rng.uniform(0.125, 0.875)),
                    (rng.uniform(0.2, 0.225), rng.uniform(-0.03, 0.03)), end=3) for _ in range(120)]
sitters = [ActorSpec(1, (0.25, 0.25), (rng.uniform(0.75, 0.875), rng.uniform(0.125, 0.875)),
                     motion="static", end=3) for _ in range(40)]
scn = generate(ScenarioSpec(movers + sitters, n_frames=4, n_classes=1))

counts = fit_transition_set(scn.annotations[1], grid)[0].toarray()
res = em_fit(HmmModel.from_anchor_grid(grid, sigma=0.05), [g.boxes for g in scn.ground_truth])
print("log-likelihood per iteration:", np.round(res.log_likelihoods, 1))

rows = np.flatnonzero(counts.sum(axis=1) >= 10)
print("rows with >= 10 samples:", rows.tolist())
print("counting argmax:", counts[rows].argmax(axis=1).tolist())
print("EM argmax:      ", res.model.transitions[rows].argmax(axis=1).tolist())
