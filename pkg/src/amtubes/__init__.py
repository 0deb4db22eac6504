"""Anchor micro-tube action proposals: geometry, transition estimation, tube linking and evaluation."""

from .geometry import AnchorGrid, Box, CellIndex, PyramidConfig, best_anchor_for, build_anchor_grid, iou
from .transmat import MicroTube, TransitionMatrix, TransitionSet, binarize, fit_transition_set, normalize, offdiagonal_mass
from .hmm import HmmModel, em_fit, forward_filter, predict_state
from .proposals import enumerate_proposals, pooling_plan
from .tubes import ActionTube, Detection, LinkParams, TrimConfig, interpolate, link_online, mean_fuse, trim
from .evaluation import GroundTruthTube, average_precision, frame_ap, tube_iou, video_ap
from .synth import ActorSpec, NoiseModel, ScenarioSpec, generate
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AnchorGrid", "Box", "CellIndex", "PyramidConfig", "best_anchor_for", "build_anchor_grid", "iou",
    "MicroTube", "TransitionMatrix", "TransitionSet", "binarize", "fit_transition_set", "normalize",
    "offdiagonal_mass", "HmmModel", "em_fit", "forward_filter", "predict_state",
    "enumerate_proposals", "pooling_plan", "ActionTube", "Detection", "LinkParams", "TrimConfig",
    "interpolate", "link_online", "mean_fuse", "trim", "GroundTruthTube", "average_precision",
    "frame_ap", "tube_iou", "video_ap", "ActorSpec", "NoiseModel", "ScenarioSpec", "generate",
    "PipelineConfig", "run_pipeline",
]
