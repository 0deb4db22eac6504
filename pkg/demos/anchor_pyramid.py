"""
Anchor pyramid
==============

Build the default six-level anchor pyramid, count its anchors and look up
the best-matching anchor for a box.
"""

import numpy as np

from amtubes import Box, PyramidConfig, best_anchor_for, build_anchor_grid

cfg = PyramidConfig.default()
grid = build_anchor_grid(cfg)
print("anchors in the default pyramid:", grid.total)

for p, lv in enumerate(cfg.levels):
    print(f"  level {p}: {lv.side}x{lv.side} cells, {lv.anchors} anchors per cell, depth {lv.depth}")

# a small square near the top-left corner
box = Box(0.05, 0.05, 0.2, 0.2)
for p in range(cfg.n_levels):
    cell, slot, score = best_anchor_for(box, grid, p)
    print(f"level {p}: cell ({cell.row}, {cell.col}) slot {slot} IoU {score:.3f}")

# the one-cell level holds full-frame anchors of several aspect ratios
print(np.round(grid.level(5)[0], 3))
