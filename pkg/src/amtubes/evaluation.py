"""
Frame-level and tube-level average precision.

Matching is greedy in descending score order: each detection claims the
unclaimed ground truth it overlaps most, provided the overlap reaches the
threshold. AP integrates the monotone precision envelope over every recall
step (all-points interpolation).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Hashable, Sequence

import numpy as np

from .geometry import iou_matrix, paired_iou
from .jsonio import RecordError, check_fields, read_jsonl
from .tubes import ActionTube


@dataclass(frozen=True, eq=False)
class GroundTruthTube:
    video_id: str | None
    class_id: int
    start: int
    end: int
    boxes: np.ndarray

    def __post_init__(self):
        boxes = np.array(self.boxes, dtype=float).reshape(-1, 4)
        if len(boxes) != self.end - self.start + 1:
            raise ValueError(
                f"ground-truth tube over [{self.start}, {self.end}] has {len(boxes)} boxes")
        if np.any(boxes[:, 2] < boxes[:, 0]) or np.any(boxes[:, 3] < boxes[:, 1]):
            raise ValueError("ground-truth boxes have corners out of order")
        boxes.setflags(write=False)
        object.__setattr__(self, "boxes", boxes)

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.start, self.end + 1)

    @classmethod
    def from_record(cls, rec: dict, strict: bool = False) -> "GroundTruthTube":
        check_fields(rec, ("class", "start", "end", "boxes"), ("video_id",), strict)
        return cls(rec.get("video_id"), int(rec["class"]), int(rec["start"]), int(rec["end"]),
                   rec["boxes"])

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "class": self.class_id,
            "start": self.start,
            "end": self.end,
            "boxes": self.boxes.tolist(),
        }


def read_ground_truth(path: str | Path, strict: bool = False) -> list[GroundTruthTube]:
    out = []
    for lineno, rec in read_jsonl(path):
        try:
            out.append(GroundTruthTube.from_record(rec, strict))
        except (RecordError, ValueError, TypeError) as exc:
            raise RecordError(str(exc), str(path), lineno) from None
    return out


def tube_iou(a, b) -> float:
    """
    Spatio-temporal IoU: temporal IoU times the mean box IoU over the
    frames both tubes cover. Works on any object with ``start``, ``end``
    and dense ``boxes``.
    """
    lo, hi = max(a.start, b.start), min(a.end, b.end)
    if hi < lo:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start) + 1
    t_iou = (hi - lo + 1) / union
    ba = a.boxes[lo - a.start:hi - a.start + 1]
    bb = b.boxes[lo - b.start:hi - b.start + 1]
    return float(t_iou * np.mean(paired_iou(ba, bb)))


@dataclass(frozen=True)
class MatchResult:
    tp: np.ndarray
    matched: np.ndarray
    overlap: np.ndarray
    scores: np.ndarray
    n_gt: int


def match_detections(scores: Sequence[float], overlaps: np.ndarray, threshold: float) -> MatchResult:
    """
    Greedy assignment of detections to ground truth.

    ``overlaps`` is ``(n_det, n_gt)``. Detections are visited by descending
    score (stable, so input order breaks ties).
    """
    s = np.asarray(scores, dtype=float)
    ov = np.asarray(overlaps, dtype=float)
    if ov.ndim != 2 or ov.shape[0] != len(s):
        raise ValueError(f"overlaps must be (n_det, n_gt) with n_det={len(s)}, got {ov.shape}")
    n_gt = ov.shape[1]
    order = np.argsort(-s, kind="stable")
    free = np.ones(n_gt, dtype=bool)
    tp = np.zeros(len(s), dtype=bool)
    matched = np.full(len(s), -1, dtype=np.int64)
    best = np.zeros(len(s))
    for k, d in enumerate(order):
        if n_gt == 0:
            continue
        cand = np.where(free, ov[d], -np.inf)
        g = int(np.argmax(cand))
        if free[g] and cand[g] >= threshold:
            free[g] = False
            tp[k] = True
            matched[k] = g
            best[k] = cand[g]
    return MatchResult(tp, matched, best, s[order], n_gt)


def ap_from_matches(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP from TP flags in ranked order."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=float)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(scores: Sequence[float], overlaps: np.ndarray, threshold: float = 0.5) -> float:
    res = match_detections(scores, overlaps, threshold)
    return ap_from_matches(res.tp, res.n_gt)


def _per_class_ap(det_groups: dict, gt_groups: dict, overlap: Callable, threshold: float) -> dict:
    """
    ``det_groups`` / ``gt_groups`` map class -> {key -> list}; detections
    are ``(score, item)`` pairs. Matching happens within each key (video or
    frame), ranking across all keys of a class.
    """
    aps = {}
    for c in sorted(gt_groups):
        n_gt = sum(len(v) for v in gt_groups[c].values())
        if n_gt == 0:
            continue
        flat = []
        for key, dets in det_groups.get(c, {}).items():
            for score, item in dets:
                flat.append((score, key, item))
        order = sorted(range(len(flat)), key=lambda k: -flat[k][0])
        free = {key: np.ones(len(v), dtype=bool) for key, v in gt_groups[c].items()}
        tp = np.zeros(len(flat), dtype=bool)
        for rank, k in enumerate(order):
            _, key, item = flat[k]
            gts = gt_groups[c].get(key, [])
            if not gts:
                continue
            ov = np.where(free[key], overlap(item, gts), -np.inf)
            g = int(np.argmax(ov))
            if free[key][g] and ov[g] >= threshold:
                free[key][g] = False
                tp[rank] = True
        aps[c] = ap_from_matches(tp, n_gt)
    return aps


def video_ap(tubes: Sequence[ActionTube], gts: Sequence[GroundTruthTube],
             threshold: float = 0.5) -> dict[int, float]:
    """Per-class video AP with spatio-temporal tube IoU."""
    det_groups: dict = {}
    for tube in tubes:
        det_groups.setdefault(tube.class_id, {}).setdefault(tube.video_id, []).append((tube.score, tube))
    gt_groups: dict = {}
    for g in gts:
        gt_groups.setdefault(g.class_id, {}).setdefault(g.video_id, []).append(g)
    return _per_class_ap(det_groups, gt_groups,
                         lambda item, gl: np.array([tube_iou(item, g) for g in gl]), threshold)


def frame_ap(tubes: Sequence[ActionTube], gts: Sequence[GroundTruthTube],
             threshold: float = 0.5) -> dict[int, float]:
    """Per-class frame AP; every tube frame is a detection with that frame's score."""
    det_groups: dict = {}
    for tube in tubes:
        per_class = det_groups.setdefault(tube.class_id, {})
        for f, box, s in zip(tube.frames, tube.boxes, tube.scores):
            per_class.setdefault((tube.video_id, int(f)), []).append((float(s), box))
    gt_groups: dict = {}
    for g in gts:
        per_class = gt_groups.setdefault(g.class_id, {})
        for f, box in zip(g.frames, g.boxes):
            per_class.setdefault((g.video_id, int(f)), []).append(box)
    return _per_class_ap(det_groups, gt_groups,
                         lambda item, gl: iou_matrix(item[None, :], np.array(gl))[0], threshold)


def mean_ap(per_class: dict[Hashable, float]) -> float:
    """Mean over classes that have ground truth; NaN if there are none."""
    if not per_class:
        return float("nan")
    return float(np.mean(list(per_class.values())))
