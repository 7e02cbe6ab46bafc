# Splitting a global sparsity budget between a text encoder and an image
# generator, and the threshold sweep used to pick a working configuration.
from prunekit.planner import (
    RECOMMENDED_CONFIG,
    SD2_IMAGE_PARAMS,
    SD2_IMAGE_PARAMS_EXACT,
    SD2_TEXT_PARAMS,
    SD2_TEXT_PARAMS_EXACT,
    allocate_by_ratio,
    default_thresholds,
    pct,
    threshold_sweep,
    total_sparsity,
)

print("Ratio allocation with 340M / 860M parameters")
print(f"{'total':>6s} {'ratio':>6s} {'text':>7s} {'image':>7s}")
for total, share in [(0.2, 0.75), (0.3, 0.75), (0.3, 0.5), (0.5, 0.5), (0.5, 0.75)]:
    p = allocate_by_ratio(total, share, SD2_TEXT_PARAMS, SD2_IMAGE_PARAMS)
    flag = "" if p.feasible else "  <- infeasible"
    print(f"{pct(total):>6s} {int(share * 100):>3d}:{100 - int(share * 100):<2d} {pct(p.s_text):>7s} {pct(p.s_image):>7s}{flag}")

# The rounded counts move some rows by up to a point; exact counts differ.
p = allocate_by_ratio(0.3, 0.75, SD2_TEXT_PARAMS_EXACT, SD2_IMAGE_PARAMS_EXACT)
print("\n30% at 75:25 with exact counts:", pct(p.s_text), "/", pct(p.s_image))

print("\nSweep down from the magnitude drop-off thresholds")
thr = default_thresholds("magnitude")
for row in threshold_sweep(thr["text"], thr["image"]).rows:
    print(f"  text {pct(row.s_text):>6s}  image {pct(row.s_image):>6s}  total {pct(row.total):>6s}")

rc = RECOMMENDED_CONFIG
print("\nrecommended:", rc, "->", pct(total_sparsity(rc["text"], rc["image"])))
