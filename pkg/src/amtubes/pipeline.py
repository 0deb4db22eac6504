"""End-to-end run: transitions, proposals, fusion, linking, trimming, evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import transmat
from .evaluation import GroundTruthTube, frame_ap, mean_ap, read_ground_truth, video_ap
from .geometry import PyramidConfig, build_anchor_grid
from .proposals import enumerate_proposals, pooling_plan
from .synth import ScenarioSpec, generate
from .tubes import APPEARANCE, FLOW, LinkParams, TrimConfig, link_videos, mean_fuse, read_detections, trim

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.1


@dataclass(frozen=True)
class PipelineConfig:
    """
    Either ``scenario`` (a synthetic spec file) or the three input files
    ``annotations``, ``detections`` and ``ground_truth`` must be given.
    ``transitions`` replaces fitting with a precomputed transition set.
    """

    pyramid: str | None = None
    scenario: str | None = None
    annotations: str | None = None
    detections: str | None = None
    ground_truth: str | None = None
    transitions: str | None = None
    delta: int | None = None
    threshold: float = DEFAULT_THRESHOLD
    n_classes: int | None = None
    eta: float = 1.0
    iou_gate: float = 0.1
    patience: int = 3
    min_score: float = 0.1
    lam: float = 0.5
    score_floor: float = 0.0
    fuse: bool = True
    fusion_gate: float = 0.5
    eval_iou: float = 0.5
    workers: int = 1
    strict: bool = False

    @classmethod
    def from_dict(cls, doc: dict, strict: bool = True) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown and strict:
            raise ValueError(f"unknown pipeline config fields {sorted(unknown)}")
        return cls(**{k: v for k, v in doc.items() if k in known})

    @classmethod
    def load(cls, path: str | Path, strict: bool = True) -> "PipelineConfig":
        with open(path) as fh:
            doc = json.load(fh)
        base = Path(path).parent
        for key in ("pyramid", "scenario", "annotations", "detections", "ground_truth", "transitions"):
            if isinstance(doc.get(key), str) and not Path(doc[key]).is_absolute():
                doc[key] = str(base / doc[key])
        return cls.from_dict(doc, strict)


def _require(path: str | None, what: str) -> str:
    if path is None:
        raise ValueError(f"pipeline needs {what}")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage and return a JSON-serializable report."""
    pyramid = PyramidConfig.load(_require(cfg.pyramid, "pyramid config")) if cfg.pyramid else PyramidConfig.default()
    grid = build_anchor_grid(pyramid)

    if cfg.scenario is not None:
        spec = ScenarioSpec.load(_require(cfg.scenario, "scenario spec"))
        scn = generate(spec)
        delta = cfg.delta if cfg.delta is not None else spec.link_delta
        if delta not in scn.annotations:
            raise ValueError(f"scenario has no annotations at delta={delta}; has {sorted(scn.annotations)}")
        annotations = scn.annotations[delta]
        detections = scn.appearance + scn.flow
        gts: list[GroundTruthTube] = scn.ground_truth
        n_classes = spec.n_classes
    else:
        annotations = transmat.read_annotations(_require(cfg.annotations, "annotations"), cfg.strict)
        detections = read_detections(_require(cfg.detections, "detections"), cfg.strict)
        gts = read_ground_truth(_require(cfg.ground_truth, "ground truth"), cfg.strict)
        delta = cfg.delta
        if delta is None:
            delta = detections[0].delta if detections else (annotations[0].delta if annotations else 1)
        annotations = [mt for mt in annotations if mt.delta == delta]
        n_classes = cfg.n_classes or (detections[0].n_classes if detections else None)
        if n_classes is None:
            raise ValueError("cannot infer the class count without detections; set n_classes")

    if cfg.transitions is not None:
        ts = transmat.load(_require(cfg.transitions, "transition set"))
        ts.check_config(pyramid)
    else:
        ts = transmat.fit_transition_set(annotations, grid, delta=delta, workers=cfg.workers)
    log.info("fitted %d micro-tubes at delta=%s", ts.n_samples, delta)
    counts_card = ts.cardinalities()
    if ts.mode == transmat.COUNTS:
        ts = ts.normalized()
    stats = transmat.stats_rows(ts)
    if ts.mode == transmat.NORMALIZED:
        ts = ts.binarized(cfg.threshold)
    plan = pooling_plan(ts, pyramid, n_classes)
    proposals = enumerate_proposals(ts, grid)

    appearance = [d for d in detections if d.stream == APPEARANCE]
    flow = [d for d in detections if d.stream == FLOW]
    if cfg.fuse and flow:
        linked_input = mean_fuse(appearance, flow, cfg.fusion_gate)
    else:
        linked_input = appearance or detections
    params = LinkParams(cfg.eta, cfg.iou_gate, cfg.patience, cfg.min_score)
    linked = link_videos(linked_input, params, cfg.workers)
    trim_cfg = TrimConfig(cfg.lam, cfg.score_floor)
    tubes = [seg for tube in linked for seg in trim(tube, trim_cfg)]

    f_ap = frame_ap(tubes, gts, cfg.eval_iou)
    v_ap = video_ap(tubes, gts, cfg.eval_iou)
    levels = []
    for p, (row, bin_card) in enumerate(zip(stats, ts.cardinalities())):
        levels.append({**row, "count_cardinality": counts_card[p], "binary_cardinality": bin_card,
                       "proposals": bin_card * pyramid.levels[p].anchors})
    return {
        "config": asdict(cfg),
        "delta": delta,
        "threshold": cfg.threshold,
        "n_micro_tubes": ts.n_samples,
        "levels": levels,
        "M": plan.M,
        "n_proposals": len(proposals),
        "heads": [h.to_dict() for h in plan.heads],
        "n_detections": {"appearance": len(appearance), "flow": len(flow),
                         "linked_input": len(linked_input)},
        "n_tubes_linked": len(linked),
        "n_tubes": len(tubes),
        "frame_ap": {str(c): ap for c, ap in f_ap.items()},
        "frame_map": _finite(mean_ap(f_ap)),
        "video_ap": {str(c): ap for c, ap in v_ap.items()},
        "video_map": _finite(mean_ap(v_ap)),
    }


def _finite(x: float) -> float | None:
    return x if math.isfinite(x) else None


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
