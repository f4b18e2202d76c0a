"""Epileptic-wave detection on multichannel recordings: self-supervised
segment representations, learned directed diffusion graphs, and hierarchical
channel/region/patient prediction, validated on synthetic recordings with
planted propagation structure.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    ChannelMap,
    Recording,
    SegmentationConfig,
    SegmentSet,
    build_hierarchy_labels,
    sample_eval_set,
    segment,
)
from .synth import ScenarioConfig, PlantedTruth, generate, truth_alignment_score  # noqa: F401
