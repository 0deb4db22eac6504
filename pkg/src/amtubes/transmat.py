"""
Heuristic per-level transition matrices estimated from ground-truth
micro-tubes.

Each ground-truth micro-tube votes for exactly one (level, i, j) cell pair:
the pair of best-matching anchors on the level whose mean IoU is highest.
Counts are row-normalized into transition probabilities and thresholded
into binary sampling masks.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import reduce
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .geometry import AnchorGrid, Box, best_anchors
from .jsonio import RecordError, check_fields, dumps, read_jsonl

COUNTS = "counts"
NORMALIZED = "normalized"
BINARY = "binary"
MODES = (COUNTS, NORMALIZED, BINARY)

_CHUNK = 512


@dataclass(frozen=True)
class MicroTube:
    """Two temporally linked boxes at frames ``t`` and ``t + delta``."""

    box_t: Box
    box_t_delta: Box
    delta: int
    class_id: int | None = None
    scores: tuple[float, ...] | None = None
    t: int | None = None
    video_id: str | None = None

    def __post_init__(self):
        if isinstance(self.delta, bool) or int(self.delta) != self.delta or self.delta < 1:
            raise ValueError(f"delta must be a positive integer, got {self.delta!r}")
        if self.scores is not None:
            object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))

    @classmethod
    def from_record(cls, rec: dict, strict: bool = False) -> "MicroTube":
        check_fields(rec, ("delta", "box_t", "box_td"), ("video_id", "t", "class"), strict)
        return cls(
            Box.from_array(rec["box_t"]),
            Box.from_array(rec["box_td"]),
            int(rec["delta"]),
            class_id=rec.get("class"),
            t=rec.get("t"),
            video_id=rec.get("video_id"),
        )

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "t": self.t,
            "delta": self.delta,
            "class": self.class_id,
            "box_t": self.box_t.to_list(),
            "box_td": self.box_t_delta.to_list(),
        }


def read_annotations(path: str | Path, strict: bool = False) -> list[MicroTube]:
    out = []
    for lineno, rec in read_jsonl(path):
        try:
            out.append(MicroTube.from_record(rec, strict))
        except (RecordError, ValueError, TypeError) as exc:
            raise RecordError(str(exc), str(path), lineno) from None
    return out


def _as_csr(matrix, dtype) -> sparse.csr_array:
    m = sparse.csr_array(matrix, dtype=dtype)
    m.eliminate_zeros()
    m.sort_indices()
    return m


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """
    Cell-to-cell matrix of one pyramid level, shape ``(side**2, side**2)``.

    ``mode`` is one of ``"counts"``, ``"normalized"`` or ``"binary"``.
    """

    level: int
    side: int
    mode: str
    matrix: sparse.csr_array

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        n = self.side * self.side
        if self.matrix.shape != (n, n):
            raise ValueError(f"level {self.level}: expected shape {(n, n)}, got {self.matrix.shape}")
        dtype = np.float64 if self.mode == NORMALIZED else np.int64
        object.__setattr__(self, "matrix", _as_csr(self.matrix, dtype))

    @classmethod
    def zeros(cls, level: int, side: int, mode: str = COUNTS) -> "TransitionMatrix":
        n = side * side
        return cls(level, side, mode, sparse.csr_array((n, n), dtype=np.int64))

    @property
    def n_cells(self) -> int:
        return self.side * self.side

    @property
    def cardinality(self) -> int:
        """Number of nonzero entries (ones, for a binary matrix)."""
        return int(self.matrix.count_nonzero())

    @property
    def total(self):
        return self.matrix.sum()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def nonzero_entries(self) -> Iterable[tuple[int, int, float]]:
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for k in order:
            yield int(coo.row[k]), int(coo.col[k]), coo.data[k].item()

    def __eq__(self, other):
        if not isinstance(other, TransitionMatrix):
            return NotImplemented
        return (
            (self.level, self.side, self.mode) == (other.level, other.side, other.mode)
            and (self.matrix != other.matrix).nnz == 0
        )


def normalize(m: TransitionMatrix) -> TransitionMatrix:
    """Divide each row by its sum; all-zero rows stay zero."""
    if m.mode == NORMALIZED:
        return m
    if m.mode != COUNTS:
        raise ValueError(f"normalize expects counts mode, got {m.mode!r}")
    sums = m.row_sums().astype(float)
    inv = np.zeros_like(sums)
    np.divide(1.0, sums, out=inv, where=sums > 0)
    probs = sparse.diags_array(inv) @ m.matrix.astype(float)
    return TransitionMatrix(m.level, m.side, NORMALIZED, probs)


def binarize(m: TransitionMatrix, threshold: float) -> TransitionMatrix:
    """Keep entries whose probability is at least ``threshold``."""
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if m.mode != NORMALIZED:
        raise ValueError(f"binarize expects normalized mode, got {m.mode!r}")
    mat = m.matrix.copy()
    mat.data = (mat.data >= threshold).astype(np.int64)
    return TransitionMatrix(m.level, m.side, BINARY, mat)


def offdiagonal_mass(m: TransitionMatrix) -> tuple[float, int]:
    """
    Mean off-diagonal probability over populated rows, and the number of
    nonzero off-diagonal entries.
    """
    offdiag = sparse.triu(m.matrix, k=1).count_nonzero() + sparse.tril(m.matrix, k=-1).count_nonzero()
    probs = normalize(replace(m, mode=COUNTS)) if m.mode == BINARY else normalize(m)
    sums = probs.row_sums()
    populated = sums > 0
    if not populated.any():
        return 0.0, int(offdiag)
    diag = probs.matrix.diagonal()
    mass = float(np.mean(sums[populated] - diag[populated]))
    return max(mass, 0.0), int(offdiag)


@dataclass(frozen=True, eq=False)
class TransitionSet:
    """One :class:`TransitionMatrix` per pyramid level plus provenance."""

    matrices: tuple[TransitionMatrix, ...]
    delta: int | None = None
    n_samples: int = 0
    threshold: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "matrices", tuple(self.matrices))
        modes = {m.mode for m in self.matrices}
        if len(modes) > 1:
            raise ValueError(f"mixed modes in one transition set: {sorted(modes)}")
        for p, m in enumerate(self.matrices):
            if m.level != p:
                raise ValueError(f"matrix at position {p} carries level {m.level}")

    def __len__(self):
        return len(self.matrices)

    def __getitem__(self, p: int) -> TransitionMatrix:
        return self.matrices[p]

    def __iter__(self):
        return iter(self.matrices)

    def __eq__(self, other):
        if not isinstance(other, TransitionSet):
            return NotImplemented
        return (
            (self.delta, self.n_samples, self.threshold) == (other.delta, other.n_samples, other.threshold)
            and self.matrices == other.matrices
        )

    @property
    def mode(self) -> str:
        return self.matrices[0].mode

    @property
    def sides(self) -> tuple[int, ...]:
        return tuple(m.side for m in self.matrices)

    def cardinalities(self) -> list[int]:
        return [m.cardinality for m in self.matrices]

    def total_count(self) -> int:
        if self.mode != COUNTS:
            raise ValueError("total_count is defined for counts mode only")
        return int(sum(m.total for m in self.matrices))

    def normalized(self) -> "TransitionSet":
        return replace(self, matrices=tuple(normalize(m) for m in self.matrices))

    def binarized(self, threshold: float) -> "TransitionSet":
        return replace(self, matrices=tuple(binarize(m, threshold) for m in self.matrices),
                       threshold=threshold)

    def check_config(self, config) -> None:
        sides = tuple(lv.side for lv in config.levels)
        if sides != self.sides:
            raise ValueError(f"transition set levels {self.sides} do not match pyramid {sides}")

    @classmethod
    def zeros(cls, sides: Sequence[int], delta: int | None = None) -> "TransitionSet":
        return cls(tuple(TransitionMatrix.zeros(p, s) for p, s in enumerate(sides)), delta)


def merge(a: TransitionSet, b: TransitionSet) -> TransitionSet:
    """Elementwise sum of two count sets fitted on disjoint partitions."""
    if a.mode != COUNTS or b.mode != COUNTS:
        raise ValueError("only counts-mode sets can be merged")
    if a.sides != b.sides:
        raise ValueError(f"level mismatch: {a.sides} vs {b.sides}")
    if a.delta is not None and b.delta is not None and a.delta != b.delta:
        raise ValueError(f"delta mismatch: {a.delta} vs {b.delta}")
    mats = tuple(
        TransitionMatrix(ma.level, ma.side, COUNTS, ma.matrix + mb.matrix)
        for ma, mb in zip(a.matrices, b.matrices)
    )
    delta = a.delta if a.delta is not None else b.delta
    return TransitionSet(mats, delta, a.n_samples + b.n_samples)


def assign_micro_tubes(boxes_t: np.ndarray, boxes_td: np.ndarray,
                       grid: AnchorGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Best anchor micro-tube per ground-truth pair.

    Returns ``(level, cell_i, cell_j, score)`` arrays, where ``score`` is
    the mean of the two per-frame best IoUs on the winning level. Level ties
    go to the finer (lower-index) level.
    """
    n = len(boxes_t)
    n_levels = grid.config.n_levels
    scores = np.empty((n_levels, n))
    cells_i = np.empty((n_levels, n), dtype=np.int64)
    cells_j = np.empty((n_levels, n), dtype=np.int64)
    for p in range(n_levels):
        ci, _, iou_i = best_anchors(boxes_t, grid, p)
        cj, _, iou_j = best_anchors(boxes_td, grid, p)
        cells_i[p], cells_j[p] = ci, cj
        scores[p] = 0.5 * (iou_i + iou_j)
    best = np.argmax(scores, axis=0)
    cols = np.arange(n)
    return best, cells_i[best, cols], cells_j[best, cols], scores[best, cols]


def _fit_chunk(boxes_t, boxes_td, grid: AnchorGrid, delta) -> TransitionSet:
    sides = [lv.side for lv in grid.config.levels]
    if len(boxes_t) == 0:
        return TransitionSet.zeros(sides, delta)
    level, ci, cj, _ = assign_micro_tubes(boxes_t, boxes_td, grid)
    mats = []
    for p, side in enumerate(sides):
        sel = level == p
        n = side * side
        coo = sparse.coo_array(
            (np.ones(int(sel.sum()), dtype=np.int64), (ci[sel], cj[sel])), shape=(n, n)
        )
        mats.append(TransitionMatrix(p, side, COUNTS, coo.tocsr()))
    return TransitionSet(tuple(mats), delta, len(boxes_t))


def fit_transition_set(micro_tubes: Iterable[MicroTube], grid: AnchorGrid,
                       delta: int | None = None, workers: int = 1) -> TransitionSet:
    """
    Count best-matching anchor transitions for a stream of ground-truth
    micro-tubes.

    All micro-tubes must share one ``delta`` (and match ``delta`` if given).
    The stream is cut into chunks that are fitted independently and merged,
    optionally on ``workers`` threads.
    """
    boxes_t, boxes_td = [], []
    for k, mt in enumerate(micro_tubes):
        if delta is None:
            delta = mt.delta
        elif mt.delta != delta:
            raise ValueError(f"micro-tube {k} has delta {mt.delta}, expected {delta}")
        boxes_t.append(mt.box_t.to_array())
        boxes_td.append(mt.box_t_delta.to_array())
    bt = np.array(boxes_t).reshape(-1, 4)
    btd = np.array(boxes_td).reshape(-1, 4)
    chunks = [(bt[s:s + _CHUNK], btd[s:s + _CHUNK]) for s in range(0, len(bt), _CHUNK)]
    if not chunks:
        return _fit_chunk(bt, btd, grid, delta)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _fit_chunk(c[0], c[1], grid, delta), chunks))
    else:
        parts = [_fit_chunk(a, b, grid, delta) for a, b in chunks]
    return reduce(merge, parts)


def stats_rows(ts: TransitionSet) -> list[dict]:
    rows = []
    for m in ts:
        mass, offdiag = offdiagonal_mass(m)
        populated = int(np.count_nonzero(m.row_sums()))
        rows.append({
            "level": m.level,
            "side": m.side,
            "cardinality": m.cardinality,
            "populated_rows": populated,
            "offdiag_nonzero": offdiag,
            "offdiag_mass": mass,
        })
    return rows


def save(ts: TransitionSet, path: str | Path) -> None:
    """Write a set as sparse JSON-lines triplets behind one header record."""
    header = {
        "kind": "transition_set",
        "mode": ts.mode,
        "delta": ts.delta,
        "n_samples": ts.n_samples,
        "threshold": ts.threshold,
        "levels": [{"level": m.level, "side": m.side} for m in ts],
    }
    with open(path, "w") as fh:
        fh.write(dumps(header) + "\n")
        for m in ts:
            for i, j, v in m.nonzero_entries():
                fh.write(dumps({"level": m.level, "i": i, "j": j, "value": v}) + "\n")


def load(path: str | Path) -> TransitionSet:
    records = read_jsonl(path)
    try:
        _, header = next(records)
    except StopIteration:
        raise RecordError("empty transition file", str(path)) from None
    if header.get("kind") != "transition_set":
        raise RecordError("first record is not a transition_set header", str(path), 1)
    mode = header["mode"]
    if mode not in MODES:
        raise RecordError(f"unknown mode {mode!r}", str(path), 1)
    sides = [lv["side"] for lv in header["levels"]]
    entries: list[tuple[list, list, list]] = [([], [], []) for _ in sides]
    for lineno, rec in records:
        try:
            check_fields(rec, ("level", "i", "j", "value"), strict=True)
            p = rec["level"]
            n = sides[p] ** 2
            if not (0 <= rec["i"] < n and 0 <= rec["j"] < n):
                raise RecordError(f"cell index out of range for level {p}")
        except (RecordError, IndexError, TypeError) as exc:
            raise RecordError(str(exc), str(path), lineno) from None
        rows, cols, vals = entries[p]
        rows.append(rec["i"])
        cols.append(rec["j"])
        vals.append(rec["value"])
    dtype = np.float64 if mode == NORMALIZED else np.int64
    mats = []
    for p, (side, (rows, cols, vals)) in enumerate(zip(sides, entries)):
        n = side * side
        coo = sparse.coo_array((np.array(vals, dtype=dtype), (np.array(rows, dtype=np.int64),
                                np.array(cols, dtype=np.int64))), shape=(n, n))
        mats.append(TransitionMatrix(p, side, mode, coo.tocsr()))
    return TransitionSet(tuple(mats), header.get("delta"), header.get("n_samples", 0),
                         header.get("threshold"))

