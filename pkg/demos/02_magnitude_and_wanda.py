# Magnitude vs. activation-aware (Wanda) scores on one small layer.
#
# Magnitude ranks weights by |W|.  Wanda multiplies |W| by the L2 norm of the
# input feature the weight reads from, so a small weight on a loud input can
# outrank a large weight on a quiet one.
import numpy as np

from prunekit.kernels import prune_layer

np.set_printoptions(precision=2, suppress=True)

W = np.array(
    [
        [0.9, -0.1, 0.4, 0.05],
        [-0.3, 0.2, -0.8, 0.1],
    ],
    dtype=np.float32,
)
# column 3 is an outlier feature: its activations are 40x larger
norms = np.array([1.0, 1.0, 1.0, 40.0])

mag, mag_mask = prune_layer(W, "magnitude", 0.5)
wan, wan_mask = prune_layer(W, "wanda", 0.5, norms=norms)

print("dense\n", W)
print("magnitude, 50% per tensor\n", mag.data)
print("wanda, 50% per row\n", wan.data)
print("pruned counts:", mag_mask.counts(), wan_mask.counts())

# With uniform norms Wanda collapses to magnitude.
same, _ = prune_layer(W, "wanda", 0.5, norms=np.full(4, 3.0), group="per_tensor")
print("uniform norms == magnitude:", np.array_equal(same.data, mag.data))
