# End to end on the seeded toy model: calibrate, prune with Wanda + OWL on the
# text side and magnitude on the image side, then measure output drift.
import numpy as np

from prunekit.calibration import accumulate_norms, iter_batches, output_divergence
from prunekit.fixtures import make_toy_fixture
from prunekit.manifest import IMAGE_GENERATOR, TEXT_ENCODER
from prunekit.pipeline import OwlSettings, prune_checkpoint

fx = make_toy_fixture(seed=42)
norms = accumulate_norms(fx.spec, fx.checkpoint, iter_batches(fx.calibration, 64))
print("calibrated layers:", ", ".join(norms))

for s_text, s_image in [(0.1, 0.1), (0.475, 0.35), (0.9, 0.9)]:
    res = prune_checkpoint(
        fx.checkpoint,
        fx.manifest,
        {TEXT_ENCODER: s_text, IMAGE_GENERATOR: s_image},
        methods={TEXT_ENCODER: "wanda", IMAGE_GENERATOR: "magnitude"},
        norms=norms,
        owl=OwlSettings(lam=min(0.08, s_text, 1 - s_text), outlier_multiplier=5.0),
    )
    div = output_divergence(fx.spec, fx.checkpoint, res.checkpoint, fx.calibration)
    c = res.report.components
    print(
        f"text {s_text:.3f} image {s_image:.3f} | achieved "
        f"{c[TEXT_ENCODER].achieved_over_prunable:.3f}/{c[IMAGE_GENERATOR].achieved_over_prunable:.3f}"
        f" | mean rel L2 {div['mean_rel_l2']:.4f}"
    )

plan = res.report.owl_plans[TEXT_ENCODER]
print("last OWL plan:", [(r["layer"], round(r["assigned_sparsity"], 4)) for r in plan])
print("layer sparsities average:", np.mean([r["assigned_sparsity"] for r in plan]))
