"""
Anchor micro-tube proposals from binarized transition matrices, and the
shape accounting of the configurable pooling layer and its heads.

Nothing here touches feature tensors: a :class:`PoolingPlan` lists which
3x3 cell windows would be pooled from the two frames and what the stacked
feature and head output sizes are.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import AnchorGrid, CellIndex, PyramidConfig
from .transmat import BINARY, TransitionSet

WINDOW = 3
PAD = -1


@dataclass(frozen=True)
class AnchorMicroTube:
    """Same anchor slot at cell ``cell_i`` (frame t) and ``cell_j`` (frame t+delta)."""

    level: int
    cell_i: CellIndex
    cell_j: CellIndex
    slot: int
    box_i: tuple[float, float, float, float]
    box_j: tuple[float, float, float, float]

    @property
    def is_cuboid(self) -> bool:
        return self.cell_i == self.cell_j

    def to_record(self) -> dict:
        return {
            "kind": "proposal",
            "level": self.level,
            "i": self.cell_i.linear,
            "j": self.cell_j.linear,
            "slot": self.slot,
            "box_i": list(self.box_i),
            "box_j": list(self.box_j),
        }


def _require_binary(ts: TransitionSet) -> None:
    if ts.mode != BINARY:
        raise ValueError(f"expected binary transition matrices, got {ts.mode!r}")


def enumerate_proposals(ts: TransitionSet, grid: AnchorGrid) -> list[AnchorMicroTube]:
    """
    One micro-tube per anchor slot for every nonzero ``(i, j)`` entry,
    ordered by (level, i, j, slot).
    """
    _require_binary(ts)
    ts.check_config(grid.config)
    out = []
    for m in ts:
        p = m.level
        anchors = grid.level(p)
        for i, j, _ in m.nonzero_entries():
            ci = CellIndex.from_linear(p, i, m.side)
            cj = CellIndex.from_linear(p, j, m.side)
            for slot in range(anchors.shape[1]):
                out.append(AnchorMicroTube(
                    p, ci, cj, slot,
                    tuple(anchors[i, slot].tolist()),
                    tuple(anchors[j, slot].tolist()),
                ))
    return out


def cell_window(cell: int, side: int) -> np.ndarray:
    """
    Linear indices of the 3x3 neighbourhood centred on ``cell``.

    Slots falling outside the grid hold ``PAD``.
    """
    row, col = divmod(cell, side)
    win = np.full((WINDOW, WINDOW), PAD, dtype=np.int64)
    for dr in range(WINDOW):
        for dc in range(WINDOW):
            r, c = row + dr - 1, col + dc - 1
            if 0 <= r < side and 0 <= c < side:
                win[dr, dc] = r * side + c
    return win


@dataclass(frozen=True)
class PooledRegion:
    level: int
    i: int
    j: int
    window_i: np.ndarray
    window_j: np.ndarray
    stacked_shape: tuple[int, int, int, int]

    @property
    def n_padding(self) -> int:
        return int((self.window_i == PAD).sum() + (self.window_j == PAD).sum())


@dataclass(frozen=True)
class HeadShapes:
    level: int
    anchors: int
    depth: int
    input_features: int
    cls_outputs: int
    reg_outputs: int

    @property
    def stacked_shape(self) -> tuple[int, int, int, int]:
        return (2, WINDOW, WINDOW, self.depth)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "r": self.anchors,
            "stacked_shape": list(self.stacked_shape),
            "input_features": self.input_features,
            "cls_outputs": self.cls_outputs,
            "reg_outputs": self.reg_outputs,
        }


@dataclass(frozen=True)
class PoolingPlan:
    regions: tuple[PooledRegion, ...]
    per_level: tuple[int, ...]
    heads: tuple[HeadShapes, ...]

    @property
    def M(self) -> int:
        return sum(self.per_level)

    def summary(self) -> dict:
        return {
            "M": self.M,
            "regions_per_level": list(self.per_level),
            "heads": [h.to_dict() for h in self.heads],
        }


def head_shapes(config: PyramidConfig, n_classes: int) -> tuple[HeadShapes, ...]:
    """Fully connected head sizes per level for ``n_classes`` foreground classes."""
    if n_classes < 1:
        raise ValueError(f"need at least one class, got {n_classes}")
    return tuple(
        HeadShapes(p, lv.anchors, lv.depth, 2 * WINDOW * WINDOW * lv.depth,
                   (n_classes + 1) * lv.anchors, 2 * 4 * lv.anchors)
        for p, lv in enumerate(config.levels)
    )


def pooling_plan(ts: TransitionSet, config: PyramidConfig, n_classes: int) -> PoolingPlan:
    """Windows to pool for every selected cell pair, plus head shapes."""
    _require_binary(ts)
    ts.check_config(config)
    heads = head_shapes(config, n_classes)
    regions = []
    per_level = []
    for m, lv in zip(ts, config.levels):
        count = 0
        for i, j, _ in m.nonzero_entries():
            regions.append(PooledRegion(
                m.level, i, j, cell_window(i, m.side), cell_window(j, m.side),
                (2, WINDOW, WINDOW, lv.depth),
            ))
            count += 1
        per_level.append(count)
    return PoolingPlan(tuple(regions), tuple(per_level), heads)
