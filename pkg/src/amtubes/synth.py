"""
Synthetic scenarios: moving box actors, their ground-truth tubes, micro-tube
annotations at several strides, and noisy two-stream detections.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import GroundTruthTube
from .geometry import Box
from .jsonio import write_jsonl
from .transmat import MicroTube
from .tubes import APPEARANCE, FLOW, Detection

CONSTANT = "constant"
STATIC = "static"
PIECEWISE = "piecewise"


@dataclass(frozen=True)
class ActorSpec:
    """
    A box of fixed ``size`` whose centre starts at ``center`` and moves by
    ``velocity`` per frame, bouncing off the image border. ``piecewise``
    motion switches to ``segments[k][1]`` from frame ``segments[k][0]`` on.
    """

    class_id: int
    size: tuple[float, float] = (0.2, 0.2)
    center: tuple[float, float] = (0.5, 0.5)
    velocity: tuple[float, float] = (0.0, 0.0)
    motion: str = CONSTANT
    segments: tuple[tuple[int, tuple[float, float]], ...] = ()
    start: int = 0
    end: int | None = None

    def __post_init__(self):
        w, h = self.size
        if not (0 < w <= 1 and 0 < h <= 1):
            raise ValueError(f"actor size {self.size} does not fit in the frame")
        if self.motion not in (CONSTANT, STATIC, PIECEWISE):
            raise ValueError(f"unknown motion {self.motion!r}")
        if self.class_id < 1:
            raise ValueError("actor class ids start at 1 (0 is background)")
        object.__setattr__(self, "segments",
                           tuple((int(f), tuple(v)) for f, v in self.segments))


@dataclass(frozen=True)
class NoiseModel:
    jitter: float = 0.0
    score_noise: float = 0.0
    miss_rate: float = 0.0
    fp_rate: float = 0.0
    true_score: float = 0.9


@dataclass(frozen=True)
class ScenarioSpec:
    actors: tuple[ActorSpec, ...]
    n_frames: int
    n_classes: int
    deltas: tuple[int, ...] = (1,)
    detection_delta: int | None = None
    noise: NoiseModel = NoiseModel()
    seed: int = 0
    video_id: str = "video_0"

    def __post_init__(self):
        object.__setattr__(self, "actors", tuple(self.actors))
        object.__setattr__(self, "deltas", tuple(self.deltas))
        if self.n_frames < 2:
            raise ValueError("need at least two frames")
        if any(d < 1 for d in self.deltas):
            raise ValueError("deltas must be positive")
        for a in self.actors:
            if a.class_id > self.n_classes:
                raise ValueError(f"actor class {a.class_id} exceeds n_classes={self.n_classes}")

    @property
    def link_delta(self) -> int:
        return self.detection_delta if self.detection_delta is not None else self.deltas[0]

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioSpec":
        doc = dict(doc)
        actors = tuple(
            ActorSpec(**{**a, "size": tuple(a.get("size", (0.2, 0.2))),
                         "center": tuple(a.get("center", (0.5, 0.5))),
                         "velocity": tuple(a.get("velocity", (0.0, 0.0))),
                         "segments": tuple(tuple(s) for s in a.get("segments", ()))})
            for a in doc.pop("actors")
        )
        noise = NoiseModel(**doc.pop("noise", {}))
        if "deltas" in doc:
            doc["deltas"] = tuple(doc["deltas"])
        return cls(actors=actors, noise=noise, **doc)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scenario:
    spec: ScenarioSpec
    ground_truth: list[GroundTruthTube]
    annotations: dict[int, list[MicroTube]]
    appearance: list[Detection]
    flow: list[Detection] = field(default_factory=list)

    @property
    def detections(self) -> list[Detection]:
        return sorted(self.appearance + self.flow, key=lambda d: d.t)


def actor_track(actor: ActorSpec, n_frames: int) -> tuple[int, int, np.ndarray]:
    """``(start, end, boxes)`` of one actor, boxes shaped ``(end - start + 1, 4)``."""
    end = n_frames - 1 if actor.end is None else min(actor.end, n_frames - 1)
    if end < actor.start:
        raise ValueError("actor ends before it starts")
    half = np.array(actor.size) / 2
    lo, hi = half, 1.0 - half
    c = np.clip(np.array(actor.center, dtype=float), lo, hi)
    v = np.zeros(2) if actor.motion == STATIC else np.array(actor.velocity, dtype=float)
    switches = dict(actor.segments) if actor.motion == PIECEWISE else {}
    boxes = []
    for f in range(actor.start, end + 1):
        if f in switches:
            v = np.array(switches[f], dtype=float)
        if f > actor.start:
            c = c + v
            for k in range(2):
                if c[k] < lo[k]:
                    c[k], v[k] = 2 * lo[k] - c[k], -v[k]
                elif c[k] > hi[k]:
                    c[k], v[k] = 2 * hi[k] - c[k], -v[k]
                c[k] = min(max(c[k], lo[k]), hi[k])
        boxes.append(np.concatenate([c - half, c + half]))
    return actor.start, end, np.clip(np.array(boxes), 0.0, 1.0)


def slice_starts(start: int, end: int, delta: int) -> range:
    """Frames ``t`` on the global stride with ``[t, t + delta]`` inside ``[start, end]``."""
    first = -(-start // delta) * delta
    return range(first, end - delta + 1, delta)


def micro_tube_slices(gt: GroundTruthTube, delta: int) -> list[MicroTube]:
    out = []
    for t in slice_starts(gt.start, gt.end, delta):
        out.append(MicroTube(Box.from_array(gt.boxes[t - gt.start]),
                             Box.from_array(gt.boxes[t + delta - gt.start]),
                             delta, class_id=gt.class_id, t=t, video_id=gt.video_id))
    return out


def _scores(n_classes: int, class_id: int, score: float) -> np.ndarray:
    s = np.full(n_classes + 1, (1.0 - score) / n_classes)
    s[class_id] = score
    return s


def _detect(spec: ScenarioSpec, gts: Sequence[GroundTruthTube], rng: np.random.Generator,
            stream: str) -> list[Detection]:
    noise = spec.noise
    delta = spec.link_delta
    per_step: dict[int, list[Detection]] = {}
    for gt in gts:
        for t in slice_starts(gt.start, gt.end, delta):
            # Draw every variate even for misses so streams stay aligned across noise settings.
            miss = rng.random() < noise.miss_rate
            jit = rng.normal(0.0, 1.0, size=(2, 4)) * noise.jitter
            sn = rng.normal(0.0, 1.0) * noise.score_noise
            if miss:
                continue
            boxes = np.stack([gt.boxes[t - gt.start], gt.boxes[t + delta - gt.start]]) + jit
            boxes = np.clip(boxes, 0.0, 1.0)
            boxes = np.concatenate([np.minimum(boxes[:, :2], boxes[:, 2:]),
                                    np.maximum(boxes[:, :2], boxes[:, 2:])], axis=1)
            score = float(np.clip(noise.true_score + sn, 0.0, 1.0))
            per_step.setdefault(t, []).append(
                Detection(t, delta, boxes, _scores(spec.n_classes, gt.class_id, score),
                          stream, spec.video_id))
    if noise.fp_rate > 0:
        for t in range(0, spec.n_frames - delta, delta):
            if rng.random() < noise.fp_rate:
                wh = rng.uniform(0.1, 0.3, size=2)
                c = rng.uniform(wh / 2, 1 - wh / 2)
                box = np.concatenate([c - wh / 2, c + wh / 2])
                cls = int(rng.integers(1, spec.n_classes + 1))
                per_step.setdefault(t, []).append(
                    Detection(t, delta, np.stack([box, box]),
                              _scores(spec.n_classes, cls, float(rng.uniform(0.1, 0.5))),
                              stream, spec.video_id))
    return [d for t in sorted(per_step) for d in per_step[t]]


def generate(spec: ScenarioSpec) -> Scenario:
    gts = []
    for a in spec.actors:
        start, end, boxes = actor_track(a, spec.n_frames)
        gts.append(GroundTruthTube(spec.video_id, a.class_id, start, end, boxes))
    annotations = {d: [mt for g in gts for mt in micro_tube_slices(g, d)] for d in spec.deltas}
    app_rng, flow_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    return Scenario(spec, gts, annotations,
                    _detect(spec, gts, app_rng, APPEARANCE),
                    _detect(spec, gts, flow_rng, FLOW))


def write_scenario(scn: Scenario, out_dir: str | Path) -> dict[str, Path]:
    """Write ``ground_truth.jsonl``, ``annotations.jsonl`` and ``detections.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "ground_truth": out / "ground_truth.jsonl",
        "annotations": out / "annotations.jsonl",
        "detections": out / "detections.jsonl",
    }
    write_jsonl(paths["ground_truth"], (g.to_record() for g in scn.ground_truth))
    write_jsonl(paths["annotations"],
                (mt.to_record() for d in sorted(scn.annotations) for mt in scn.annotations[d]))
    write_jsonl(paths["detections"], (d.to_record() for d in scn.appearance + scn.flow))
    return paths
