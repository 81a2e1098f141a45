"""Region tokens: point-prompted cross-attention pooling over patch features,
in-frame merging, temporal tracking, and a synthetic training/evaluation harness."""

from .config import ConfigError, RunConfig
from .encoder import FeatureGrid, ModelConfig, RegionEncoder, RegionToken, encode_prompts, project_to_text
from .merging import MergeConfig, MergedToken, MergedTokenSet, merge_tokens
from .pipeline import VARIANTS, Pipeline, ablation_variants
from .tracker import FinalTrack, TrackConfig, TrackerState, finalize, track_video, update

__all__ = [
    "ConfigError", "RunConfig", "FeatureGrid", "ModelConfig", "RegionEncoder", "RegionToken", "encode_prompts",
    "project_to_text", "MergeConfig", "MergedToken", "MergedTokenSet", "merge_tokens", "VARIANTS", "Pipeline",
    "ablation_variants", "FinalTrack", "TrackConfig", "TrackerState", "finalize", "track_video", "update",
]
__version__ = "0.1.0"
