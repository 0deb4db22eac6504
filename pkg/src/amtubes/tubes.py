"""
Online action-tube construction from detection micro-tubes.

Detections arrive as micro-tubes ``(box at t, box at t+delta)`` with a
class-score vector whose entry 0 is background. Per class, live paths are
extended greedily, one forward pass in time. Finished paths are densified
by linear interpolation and can be split into action segments by a
two-label dynamic program.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import iou_matrix, paired_iou
from .jsonio import RecordError, check_fields, read_jsonl

APPEARANCE = "appearance"
FLOW = "flow"
FUSED = "fused"
STREAMS = (APPEARANCE, FLOW, FUSED)


@dataclass(frozen=True, eq=False)
class Detection:
    """A scored micro-tube: ``boxes[0]`` at frame ``t``, ``boxes[1]`` at ``t + delta``."""

    t: int
    delta: int
    boxes: np.ndarray
    scores: np.ndarray
    stream: str = APPEARANCE
    video_id: str | None = None

    def __post_init__(self):
        boxes = np.array(self.boxes, dtype=float).reshape(2, 4)
        scores = np.array(self.scores, dtype=float).ravel()
        if self.delta < 1:
            raise ValueError(f"delta must be >= 1, got {self.delta}")
        if scores.size < 2:
            raise ValueError("scores need a background entry and at least one class")
        if np.any(scores < 0) or np.any(scores > 1):
            raise ValueError("scores must lie in [0, 1]")
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream {self.stream!r}")
        boxes.setflags(write=False)
        scores.setflags(write=False)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "scores", scores)

    @property
    def n_classes(self) -> int:
        return self.scores.size - 1

    @classmethod
    def from_record(cls, rec: dict, strict: bool = False) -> "Detection":
        check_fields(rec, ("t", "delta", "boxes", "scores"), ("video_id", "stream"), strict)
        return cls(int(rec["t"]), int(rec["delta"]), rec["boxes"], rec["scores"],
                   rec.get("stream", APPEARANCE), rec.get("video_id"))

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "t": self.t,
            "delta": self.delta,
            "stream": self.stream,
            "boxes": self.boxes.tolist(),
            "scores": self.scores.tolist(),
        }


def read_detections(path: str | Path, strict: bool = False) -> list[Detection]:
    out = []
    for lineno, rec in read_jsonl(path):
        try:
            out.append(Detection.from_record(rec, strict))
        except (RecordError, ValueError, TypeError) as exc:
            raise RecordError(str(exc), str(path), lineno) from None
    return out


@dataclass(frozen=True, eq=False)
class ActionTube:
    """Dense per-frame boxes of one class over ``[start, end]``."""

    class_id: int
    start: int
    end: int
    boxes: np.ndarray
    scores: np.ndarray
    score: float
    video_id: str | None = None

    def __post_init__(self):
        boxes = np.array(self.boxes, dtype=float).reshape(-1, 4)
        scores = np.array(self.scores, dtype=float).ravel()
        if self.end < self.start:
            raise ValueError(f"tube ends ({self.end}) before it starts ({self.start})")
        n = self.end - self.start + 1
        if len(boxes) != n or len(scores) != n:
            raise ValueError(f"tube over {n} frames has {len(boxes)} boxes and {len(scores)} scores")
        boxes.setflags(write=False)
        scores.setflags(write=False)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "score", float(self.score))

    @property
    def n_frames(self) -> int:
        return self.end - self.start + 1

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.start, self.end + 1)

    def box_at(self, frame: int) -> np.ndarray:
        return self.boxes[frame - self.start]

    def segment(self, first: int, last: int) -> "ActionTube":
        """Sub-tube over frames ``[first, last]``, scored by its mean frame score."""
        a, b = first - self.start, last - self.start + 1
        return ActionTube(self.class_id, first, last, self.boxes[a:b], self.scores[a:b],
                          float(np.mean(self.scores[a:b])), self.video_id)

    @classmethod
    def from_record(cls, rec: dict, strict: bool = False) -> "ActionTube":
        check_fields(rec, ("class", "start", "end", "boxes"), ("video_id", "score", "scores"), strict)
        n = int(rec["end"]) - int(rec["start"]) + 1
        scores = rec.get("scores")
        score = rec.get("score", 1.0)
        if scores is None:
            scores = [score] * n
        return cls(int(rec["class"]), int(rec["start"]), int(rec["end"]), rec["boxes"], scores,
                   score, rec.get("video_id"))

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "class": self.class_id,
            "start": self.start,
            "end": self.end,
            "boxes": self.boxes.tolist(),
            "scores": self.scores.tolist(),
            "score": self.score,
        }


def read_tubes(path: str | Path, strict: bool = False) -> list[ActionTube]:
    out = []
    for lineno, rec in read_jsonl(path):
        try:
            out.append(ActionTube.from_record(rec, strict))
        except (RecordError, ValueError, TypeError) as exc:
            raise RecordError(str(exc), str(path), lineno) from None
    return out


def interpolate(frames: Sequence[int], boxes: np.ndarray,
                scores: Sequence[float] | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Fill every frame between sorted keyframes by linear interpolation of
    box corners (and scores). Keyframe values are kept exactly.

    Returns
    -------
    frames, boxes, scores : ndarray
        Dense frame range, ``(n, 4)`` boxes, ``(n,)`` scores.
    """
    kf = np.asarray(frames, dtype=np.int64)
    kb = np.asarray(boxes, dtype=float).reshape(-1, 4)
    ks = np.ones(len(kf)) if scores is None else np.asarray(scores, dtype=float)
    if len(kf) == 0:
        raise ValueError("need at least one keyframe")
    if np.any(np.diff(kf) <= 0):
        raise ValueError("keyframes must be strictly increasing")
    dense_f = np.arange(kf[0], kf[-1] + 1)
    dense_b = np.empty((len(dense_f), 4))
    dense_s = np.empty(len(dense_f))
    for k in range(len(kf) - 1):
        f0, f1 = kf[k], kf[k + 1]
        frac = (np.arange(f0, f1) - f0) / (f1 - f0)
        rows = slice(f0 - kf[0], f1 - kf[0])
        dense_b[rows] = kb[k] + frac[:, None] * (kb[k + 1] - kb[k])
        dense_s[rows] = ks[k] + frac * (ks[k + 1] - ks[k])
    dense_b[-1] = kb[-1]
    dense_s[-1] = ks[-1]
    return dense_f, dense_b, dense_s


@dataclass(frozen=True)
class LinkParams:
    """
    eta : weight of IoU in the linking score ``class_score + eta * IoU``
    iou_gate : minimum IoU for a path/detection association
    patience : consecutive unmatched steps after which a path ends
    min_score : class score a detection needs to open a new path
    """

    eta: float = 1.0
    iou_gate: float = 0.1
    patience: int = 3
    min_score: float = 0.1

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class _Path:
    id: int
    class_id: int
    delta: int
    members: list = field(default_factory=list)

    @property
    def last_t(self) -> int:
        return self.members[-1][0]

    @property
    def trailing_box(self) -> np.ndarray:
        return self.members[-1][1][1]

    def to_tube(self, video_id) -> ActionTube:
        key_boxes: dict[int, list] = defaultdict(list)
        key_scores: dict[int, list] = defaultdict(list)
        for t, boxes, score in self.members:
            for f, box in ((t, boxes[0]), (t + self.delta, boxes[1])):
                key_boxes[f].append(box)
                key_scores[f].append(score)
        frames = sorted(key_boxes)
        kb = np.array([np.mean(key_boxes[f], axis=0) for f in frames])
        ks = np.array([np.mean(key_scores[f]) for f in frames])
        dense_f, dense_b, dense_s = interpolate(frames, kb, ks)
        agg = float(np.mean([m[2] for m in self.members]))
        return ActionTube(self.class_id, int(dense_f[0]), int(dense_f[-1]), dense_b, dense_s,
                          agg, video_id)


def _group_steps(detections: Iterable[Detection]) -> list[tuple[int, list[Detection]]]:
    steps: list[tuple[int, list[Detection]]] = []
    delta = None
    for k, d in enumerate(detections):
        if delta is None:
            delta = d.delta
        elif d.delta != delta:
            raise ValueError(f"detection {k}: delta {d.delta} differs from {delta}")
        if steps and d.t < steps[-1][0]:
            raise ValueError(f"detection {k}: frame {d.t} is out of order")
        if steps and d.t == steps[-1][0]:
            steps[-1][1].append(d)
        else:
            if steps and (d.t - steps[0][0]) % delta:
                raise ValueError(f"detection {k}: frame {d.t} is off the delta={delta} stride")
            steps.append((d.t, [d]))
    return steps


def link_online(detections: Iterable[Detection], params: LinkParams = LinkParams()) -> list[ActionTube]:
    """
    Build class-specific action tubes in one forward pass.

    ``detections`` must be sorted by frame and belong to one video. At each
    step, for each class, live paths and new detections are paired
    greedily by ``class_score + eta * IoU`` (IoU between the path's
    trailing box and the detection's leading box, gated at ``iou_gate``).
    Ties prefer the older path, then the earlier detection. Unmatched
    detections scoring at least ``min_score`` open new paths.

    Tubes are returned ordered by path creation.
    """
    steps = _group_steps(detections)
    if not steps:
        return []
    delta = steps[0][1][0].delta
    n_classes = steps[0][1][0].n_classes
    video_id = steps[0][1][0].video_id
    ids = itertools.count()
    live: dict[int, list[_Path]] = {c: [] for c in range(1, n_classes + 1)}
    done: list[_Path] = []

    for t, dets in steps:
        if any(d.n_classes != n_classes for d in dets):
            raise ValueError(f"frame {t}: inconsistent class count")
        lead = np.array([d.boxes[0] for d in dets])
        for c in range(1, n_classes + 1):
            paths = []
            for p in live[c]:
                if (t - p.last_t) // delta - 1 >= params.patience:
                    done.append(p)
                else:
                    paths.append(p)
            cls_scores = np.array([d.scores[c] for d in dets])
            taken_p: set[int] = set()
            taken_d: set[int] = set()
            if paths:
                ious = iou_matrix(np.array([p.trailing_box for p in paths]), lead)
                pairs = [
                    (-(cls_scores[di] + params.eta * ious[pi, di]), pi, di)
                    for pi in range(len(paths)) for di in range(len(dets))
                    if ious[pi, di] >= params.iou_gate
                ]
                for _, pi, di in sorted(pairs):
                    if pi in taken_p or di in taken_d:
                        continue
                    taken_p.add(pi)
                    taken_d.add(di)
                    paths[pi].members.append((t, dets[di].boxes, float(cls_scores[di])))
            still = []
            for pi, p in enumerate(paths):
                if pi not in taken_p and (t - p.last_t) // delta >= params.patience:
                    done.append(p)
                else:
                    still.append(p)
            for di, d in enumerate(dets):
                if di not in taken_d and cls_scores[di] >= params.min_score:
                    still.append(_Path(next(ids), c, delta, [(t, d.boxes, float(cls_scores[di]))]))
            live[c] = still

    for c in live:
        done.extend(live[c])
    done.sort(key=lambda p: p.id)
    return [p.to_tube(video_id) for p in done]


def group_by_video(items: Iterable, key=lambda x: x.video_id) -> dict:
    groups: dict = {}
    for it in items:
        groups.setdefault(key(it), []).append(it)
    return groups


def link_videos(detections: Iterable[Detection], params: LinkParams = LinkParams(),
                workers: int = 1) -> list[ActionTube]:
    """Link each video independently; output order follows first appearance."""
    groups = group_by_video(detections)
    for dets in groups.values():
        dets.sort(key=lambda d: d.t)
    run = lambda dets: link_online(dets, params)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, groups.values()))
    else:
        results = [run(d) for d in groups.values()]
    return [tube for tubes in results for tube in tubes]


@dataclass(frozen=True)
class TrimConfig:
    lam: float = 0.5
    score_floor: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"label-change penalty must be finite and >= 0, got {self.lam}")


def labeling_objective(scores: Sequence[float], labels: Sequence[int], lam: float) -> float:
    """``sum_t s_{l_t}(t) - lam * #label changes`` with background score ``1 - s``."""
    total = 0.0
    prev = None
    for s, l in zip(scores, labels):
        total += s if l else 1.0 - s
        if prev is not None and l != prev:
            total -= lam
        prev = l
    return total


def trim_labels(scores: Sequence[float], lam: float) -> np.ndarray:
    """
    Exact two-label Viterbi segmentation into action (1) and background (0).

    Ties keep the previous label; at the last frame they favour background.
    """
    s = np.asarray(scores, dtype=float)
    n = len(s)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    unary = np.stack([1.0 - s, s], axis=1)
    value = unary[0].copy()
    back = np.zeros((n, 2), dtype=np.int64)
    for t in range(1, n):
        new = np.empty(2)
        for l in (0, 1):
            stay, switch = value[l], value[1 - l] - lam
            if stay >= switch:
                new[l], back[t, l] = stay, l
            else:
                new[l], back[t, l] = switch, 1 - l
            new[l] += unary[t, l]
        value = new
    labels = np.empty(n, dtype=np.int64)
    labels[-1] = 1 if value[1] > value[0] else 0
    for t in range(n - 1, 0, -1):
        labels[t - 1] = back[t, labels[t]]
    return labels


def trim(tube: ActionTube, cfg: TrimConfig = TrimConfig()) -> list[ActionTube]:
    """Split a dense tube into its action segments."""
    labels = trim_labels(tube.scores, cfg.lam)
    out = []
    t = 0
    while t < len(labels):
        if labels[t]:
            u = t
            while u + 1 < len(labels) and labels[u + 1]:
                u += 1
            seg = tube.segment(tube.start + t, tube.start + u)
            if seg.score >= cfg.score_floor:
                out.append(seg)
            t = u + 1
        else:
            t += 1
    return out


def mean_fuse(appearance: Sequence[Detection], flow: Sequence[Detection],
              iou_gate: float = 0.5) -> list[Detection]:
    """
    Late fusion by score averaging.

    Within each (video, frame) group, detections of the two streams are
    matched greedily by IoU averaged over both micro-tube frames. A matched
    pair keeps the appearance boxes with the mean of the two score vectors;
    unmatched detections pass through untouched.
    """
    groups: dict = {}
    for stream_id, dets in ((0, appearance), (1, flow)):
        for d in dets:
            groups.setdefault((d.video_id, d.t), ([], []))[stream_id].append(d)
    out = []
    for key in sorted(groups, key=lambda k: (str(k[0]), k[1])):
        app, flo = groups[key]
        pairs = []
        for ai, a in enumerate(app):
            for fi, f in enumerate(flo):
                if a.delta != f.delta:
                    raise ValueError(f"frame {key[1]}: streams disagree on delta")
                ov = float(np.mean(paired_iou(a.boxes, f.boxes)))
                if ov >= iou_gate:
                    pairs.append((-ov, ai, fi))
        match: dict[int, int] = {}
        used_f: set[int] = set()
        for _, ai, fi in sorted(pairs):
            if ai in match or fi in used_f:
                continue
            match[ai] = fi
            used_f.add(fi)
        for ai, a in enumerate(app):
            if ai in match:
                f = flo[match[ai]]
                if f.scores.shape != a.scores.shape:
                    raise ValueError(f"frame {key[1]}: streams disagree on class count")
                out.append(Detection(a.t, a.delta, a.boxes, 0.5 * (a.scores + f.scores),
                                     FUSED, a.video_id))
            else:
                out.append(a)
        out.extend(f for fi, f in enumerate(flo) if fi not in used_f)
    return out
