"""moe-lens: expert-split dense transformer FFNs, profile per-language
activation frequencies, and use them to drive sparse-activation pruning."""

__version__ = "0.1.0"

from .model import ModelConfig, ModelBundle, load_model, save_model, forward, forward_masked
from .split import ClusterConfig, ExpertPartition, split_layer, split_model
from .profiler import ProfileConfig, FrequencyMatrix, profile_corpus, merge

__all__ = [
    "ModelConfig",
    "ModelBundle",
    "load_model",
    "save_model",
    "forward",
    "forward_masked",
    "ClusterConfig",
    "ExpertPartition",
    "split_layer",
    "split_model",
    "ProfileConfig",
    "FrequencyMatrix",
    "profile_corpus",
    "merge",
]
