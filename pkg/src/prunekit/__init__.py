"""Post-training pruning (magnitude, Wanda, OWL) and component sparsity planning."""

__version__ = "0.1.0"

from .container import Checkpoint, ContainerError, Tensor, read_checkpoint, tensor_stats, write_checkpoint
from .kernels import (
    PruneMask,
    apply_mask,
    magnitude_scores,
    prune_layer,
    select_prune_mask,
    wanda_scores,
)
from .manifest import Manifest, PrunablePolicy, Rule, classify_tensors, component_profiles, prunable_set
from .owl import OwlConfig, allocate_layer_sparsities, layer_outlier_ratio, owl_prune_component
from .calibration import LayerActivationStats, ToyModelSpec, accumulate_norms, forward, output_divergence
from .planner import allocate_by_ratio, default_thresholds, threshold_sweep, total_sparsity
from .pipeline import OwlSettings, PruneReport, prune_checkpoint
