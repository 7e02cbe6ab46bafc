# Outlier-weighted layerwise sparsity.
#
# Each layer's outlier ratio D is the share of |W| * ||X|| scores above M times
# the layer mean.  Layers with more outliers get less sparsity; the average
# stays at the target and no layer moves more than lambda from it.
import numpy as np

from prunekit.owl import OwlConfig, allocate_layer_sparsities, layer_outlier_ratio

rng = np.random.default_rng(1)
layers = {}
for i, spikes in enumerate([0, 2, 6, 12]):
    W = rng.normal(size=(64, 64)).astype(np.float32)
    norms = np.ones(64)
    norms[:spikes] = 30.0  # a few loud input channels
    layers[f"block{i}"] = layer_outlier_ratio(W, norms, outlier_multiplier=5.0)

plan = allocate_layer_sparsities(list(layers.values()), OwlConfig(0.5, lam=0.08), names=list(layers))
print(f"{'layer':8s} {'outliers':>9s} {'sparsity':>9s}")
for e in plan.entries:
    print(f"{e.layer:8s} {e.outlier_ratio:9.4f} {e.assigned_sparsity:9.4f}")
print("mean sparsity:", round(plan.mean_sparsity(), 12))
