# Writing, reading and inspecting a checkpoint container.
#
# A container is an 8-byte little-endian header length, a compact JSON header
# and a flat float32 payload.  Everything here runs in memory.
import numpy as np

from prunekit.container import Checkpoint, ContainerError, parse_checkpoint, serialize_checkpoint, tensor_stats

rng = np.random.default_rng(0)
ckpt = Checkpoint.from_arrays(
    {
        "encoder.proj.weight": rng.normal(size=(4, 6)),
        "encoder.proj.bias": np.zeros(4),
    },
    metadata={"note": "demo"},
)

blob = serialize_checkpoint(ckpt)
header_len = int.from_bytes(blob[:8], "little")
print("file size     :", len(blob), "bytes")
print("header        :", blob[8 : 8 + header_len].decode())

back = parse_checkpoint(blob)
print("round trip ok :", back == ckpt)
for t in back:
    s = tensor_stats(t)
    print(f"  {t.name:22s} shape={t.shape}  zeros={s.zeros}/{s.count}  sparsity={s.sparsity:.2f}")

# Cutting the payload short is reported against the tensor that is affected.
try:
    parse_checkpoint(blob[:-4])
except ContainerError as err:
    print("truncated file:", err)
