"""Lane detection with context-gated rough segmentation and point-set completion."""

from .autodiff import Tensor, backward, gradient_check, no_grad
from .config import RunConfig, load_config, parse_config
from .continuity import LanePointSet, confidence_filter, encode_geometry, extract_point_sets
from .completion import CompletionHead, complete, completion_loss, quantize, render_lane
from .data import Sample, SceneSpec, generate
from .metrics import culane_f1, lane_iou, tusimple_scores
from .rough import BackboneConfig, RoughModel, forward_rough, rough_loss

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "CompletionHead", "LanePointSet", "RoughModel", "RunConfig", "Sample", "SceneSpec",
    "Tensor", "backward", "complete", "completion_loss", "confidence_filter", "culane_f1",
    "encode_geometry", "extract_point_sets", "forward_rough", "generate", "gradient_check", "lane_iou",
    "load_config", "no_grad", "parse_config", "quantize", "render_lane", "rough_loss", "tusimple_scores",
]
