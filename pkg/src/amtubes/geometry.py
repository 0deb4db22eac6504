"""
Boxes, IoU and anchor-pyramid geometry.

All coordinates are normalized to the unit square, ``x`` running along grid
columns and ``y`` along grid rows. Anchors follow the single-shot-detector
default-box recipe unless a level carries an explicit ``scale``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DEFAULT_SIDES = (38, 19, 10, 5, 3, 1)
DEFAULT_ANCHORS = (4, 6, 6, 6, 4, 4)
DEFAULT_DEPTHS = (512, 1024, 512, 256, 256, 256)

# Default-box scale range across pyramid levels.
MIN_SCALE = 0.2
MAX_SCALE = 0.9


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[x_min, y_min, x_max, y_max]``, clamped to [0, 1]."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"box corners out of order: {coords}")
        for name, value in zip(("x_min", "y_min", "x_max", "y_max"), coords):
            object.__setattr__(self, name, float(min(max(value, 0.0), 1.0)))

    @classmethod
    def from_array(cls, coords: Sequence[float]) -> "Box":
        if len(coords) != 4:
            raise ValueError(f"expected 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    def to_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union has no area."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """
    Pairwise IoU between two box arrays.

    Parameters
    ----------
    boxes_a : ndarray, shape (N, 4)
    boxes_b : ndarray, shape (M, 4)

    Returns
    -------
    ndarray, shape (N, M)
    """
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def paired_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two equally shaped ``(N, 4)`` arrays."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = (
        (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
        + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
        - inter
    )
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


@dataclass(frozen=True)
class LevelConfig:
    side: int
    anchors: int
    depth: int = 256
    scale: float | None = None

    def __post_init__(self):
        for name in ("side", "anchors", "depth"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"level {name} must be a positive integer, got {value!r}")
        if self.scale is not None and not (0.0 < self.scale <= 1.0):
            raise ValueError(f"level scale must lie in (0, 1], got {self.scale}")

    @property
    def n_cells(self) -> int:
        return self.side * self.side

    @property
    def n_anchors(self) -> int:
        return self.n_cells * self.anchors


@dataclass(frozen=True)
class PyramidConfig:
    """Ordered feature-grid levels, finest first."""

    levels: tuple[LevelConfig, ...]
    min_scale: float = MIN_SCALE
    max_scale: float = MAX_SCALE

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        sides = [lv.side for lv in self.levels]
        if any(b >= a for a, b in zip(sides, sides[1:])):
            raise ValueError(f"grid sides must be strictly decreasing, got {sides}")
        if not (0.0 < self.min_scale <= self.max_scale <= 1.0):
            raise ValueError("scales must satisfy 0 < min_scale <= max_scale <= 1")

    @classmethod
    def default(cls) -> "PyramidConfig":
        return cls(tuple(
            LevelConfig(s, r, d) for s, r, d in zip(DEFAULT_SIDES, DEFAULT_ANCHORS, DEFAULT_DEPTHS)
        ))

    @classmethod
    def single(cls, side: int, anchors: int = 1, depth: int = 256,
               scale: float | None = None) -> "PyramidConfig":
        return cls((LevelConfig(side, anchors, depth, scale),))

    @classmethod
    def from_dict(cls, doc: dict) -> "PyramidConfig":
        levels = []
        for i, lv in enumerate(doc["levels"]):
            unknown = set(lv) - {"side", "r", "depth", "scale"}
            if unknown:
                raise ValueError(f"level {i}: unknown fields {sorted(unknown)}")
            levels.append(LevelConfig(lv["side"], lv["r"], lv.get("depth", 256), lv.get("scale")))
        kwargs = {k: doc[k] for k in ("min_scale", "max_scale") if k in doc}
        return cls(tuple(levels), **kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "PyramidConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        levels = []
        for lv in self.levels:
            d = {"side": lv.side, "r": lv.anchors, "depth": lv.depth}
            if lv.scale is not None:
                d["scale"] = lv.scale
            levels.append(d)
        return {"levels": levels, "min_scale": self.min_scale, "max_scale": self.max_scale}

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def total_anchors(self) -> int:
        return sum(lv.n_anchors for lv in self.levels)

    def level_scales(self) -> list[float]:
        """
        Default-box scale per level plus one extrapolated scale for the
        extra square box of the last level.

        A lone level tiles the image: its scale is one cell width.
        """
        n = self.n_levels
        if n == 1:
            base = [1.0 / self.levels[0].side]
            nxt = [1.0]
        else:
            step = (self.max_scale - self.min_scale) / (n - 1)
            base = [self.min_scale + step * k for k in range(n)]
            nxt = base[1:] + [min(self.max_scale + step, 1.0)]
        scales = []
        for lv, s, s_next in zip(self.levels, base, nxt):
            if lv.scale is not None:
                s = lv.scale
                s_next = max(s_next, s)
            scales.append((s, s_next))
        return scales


def aspect_ratios(r: int) -> list[float | None]:
    """
    Slot layout for ``r`` anchors per cell.

    ``None`` marks the extra square box at the geometric-mean scale; it is
    present whenever ``r`` is even. Remaining slots take ratios
    ``1, 2, 1/2, 3, 1/3, ...`` in that order.
    """
    out: list[float | None] = [1.0]
    if r % 2 == 0:
        out.append(None)
    k = 2
    while len(out) < r:
        out.append(float(k))
        if len(out) < r:
            out.append(1.0 / k)
        k += 1
    return out


@dataclass(frozen=True)
class CellIndex:
    level: int
    row: int
    col: int
    side: int = field(compare=False)

    def __post_init__(self):
        if not (0 <= self.row < self.side and 0 <= self.col < self.side):
            raise ValueError(f"cell ({self.row}, {self.col}) outside {self.side}x{self.side} grid")

    @property
    def linear(self) -> int:
        return self.row * self.side + self.col

    @classmethod
    def from_linear(cls, level: int, index: int, side: int) -> "CellIndex":
        return cls(level, index // side, index % side, side)


@dataclass(frozen=True, eq=False)
class AnchorGrid:
    """
    Anchors of every pyramid level.

    ``anchors[p]`` has shape ``(side_p**2, r_p, 4)``: cells in row-major
    order, then anchor slots.
    """

    config: PyramidConfig
    anchors: tuple[np.ndarray, ...]

    def level(self, p: int) -> np.ndarray:
        return self.anchors[p]

    def flat(self, p: int) -> np.ndarray:
        return self.anchors[p].reshape(-1, 4)

    def anchor_box(self, p: int, cell: int, slot: int) -> Box:
        return Box.from_array(self.anchors[p][cell, slot])

    @property
    def total(self) -> int:
        return sum(a.shape[0] * a.shape[1] for a in self.anchors)

    def iter_anchors(self) -> Iterator[tuple[int, int, int, int, np.ndarray]]:
        """Yield ``(level, row, col, slot, box)`` in deterministic order."""
        for p, arr in enumerate(self.anchors):
            side = self.config.levels[p].side
            for cell in range(arr.shape[0]):
                for slot in range(arr.shape[1]):
                    yield p, cell // side, cell % side, slot, arr[cell, slot]


def build_anchor_grid(config: PyramidConfig) -> AnchorGrid:
    levels = []
    for lv, (s, s_next) in zip(config.levels, config.level_scales()):
        sizes = []
        for ratio in aspect_ratios(lv.anchors):
            if ratio is None:
                w = h = math.sqrt(s * s_next)
            else:
                w, h = s * math.sqrt(ratio), s / math.sqrt(ratio)
            sizes.append((w, h))
        sizes = np.array(sizes)

        idx = np.arange(lv.side)
        cy, cx = np.meshgrid((idx + 0.5) / lv.side, (idx + 0.5) / lv.side, indexing="ij")
        cx = cx.reshape(-1, 1)
        cy = cy.reshape(-1, 1)
        half_w = sizes[None, :, 0] / 2
        half_h = sizes[None, :, 1] / 2
        boxes = np.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=-1)
        boxes = np.clip(boxes, 0.0, 1.0)
        boxes.setflags(write=False)
        levels.append(boxes)
    return AnchorGrid(config, tuple(levels))


def best_anchor_for(box: Box | np.ndarray, grid: AnchorGrid, level: int) -> tuple[CellIndex, int, float]:
    """
    Highest-IoU anchor of one level.

    Ties go to the lowest linear cell index, then the lowest slot.
    """
    arr = grid.level(level)
    target = box.to_array() if isinstance(box, Box) else np.asarray(box, dtype=float)
    scores = iou_matrix(target[None, :], arr.reshape(-1, 4))[0]
    k = int(np.argmax(scores))
    r = arr.shape[1]
    side = grid.config.levels[level].side
    return CellIndex.from_linear(level, k // r, side), k % r, float(scores[k])


def best_anchors(boxes: np.ndarray, grid: AnchorGrid, level: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`best_anchor_for`: returns ``(cells, slots, ious)``."""
    arr = grid.level(level)
    scores = iou_matrix(boxes, arr.reshape(-1, 4))
    k = np.argmax(scores, axis=1)
    r = arr.shape[1]
    return k // r, k % r, scores[np.arange(len(k)), k]
