import math
import struct

import numpy as np
import pytest

from prunekit.calibration import (
    LayerSpec,
    ToyModelSpec,
    accumulate_norms,
    forward,
    iter_batches,
    norms_from_dict,
    norms_to_dict,
    output_divergence,
    read_calibration,
    read_norms,
    write_calibration,
    write_norms,
)
from prunekit.container import Checkpoint
from prunekit.fixtures import make_toy_fixture


def _linear(name, bias=None):
    return LayerSpec("linear", name, bias)


def _mlp(seed=0, dims=(6, 5, 4, 3)):
    rng = np.random.default_rng(seed)
    arrays, layers = {}, []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        arrays[f"w{i}"] = rng.normal(size=(n_out, n_in))
        arrays[f"b{i}"] = rng.normal(size=n_out)
        layers.append(_linear(f"w{i}", f"b{i}"))
        if i < len(dims) - 2:
            layers.append(LayerSpec("relu" if i % 2 == 0 else "gelu"))
    return ToyModelSpec(tuple(layers), dims[0]), Checkpoint.from_arrays(arrays)


def _oracle_forward(spec, ckpt, batch):
    """Row-by-row, element-by-element reimplementation."""
    out = []
    for row in np.asarray(batch, dtype=np.float64).tolist():
        x = row
        for l in spec.layers:
            if l.kind == "linear":
                W = ckpt[l.weight_name].data.astype(np.float64).tolist()
                b = ckpt[l.bias_name].data.astype(np.float64).tolist() if l.bias_name else [0.0] * len(W)
                x = [sum(wij * xj for wij, xj in zip(wi, x)) + bi for wi, bi in zip(W, b)]
            elif l.kind == "relu":
                x = [max(v, 0.0) for v in x]
            else:
                x = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
        out.append(x)
    return np.array(out)


def test_identity_layer():
    spec = ToyModelSpec((_linear("eye", "zero"),), 3)
    ckpt = Checkpoint.from_arrays({"eye": np.eye(3), "zero": np.zeros(3)})
    x = np.array([[1.0, -2.0, 3.5]])
    np.testing.assert_array_equal(forward(spec, ckpt, x).output, x)


def test_hand_matrix_product():
    spec = ToyModelSpec((_linear("w"),), 2)
    ckpt = Checkpoint.from_arrays({"w": [[1, 2], [3, 4]]})
    np.testing.assert_array_equal(forward(spec, ckpt, [1.0, 1.0]).output, [[3.0, 7.0]])


def test_forward_matches_oracle():
    spec, ckpt = _mlp(1)
    x = np.random.default_rng(2).normal(size=(20, 6))
    res = forward(spec, ckpt, x)
    np.testing.assert_allclose(res.output, _oracle_forward(spec, ckpt, x), rtol=1e-6, atol=1e-12)
    assert set(res.layer_inputs) == {"w0", "w1", "w2"}
    np.testing.assert_array_equal(res.layer_inputs["w0"], x)


def test_spec_validation():
    spec, ckpt = _mlp()
    with pytest.raises(ValueError, match="batch"):
        forward(spec, ckpt, np.ones((2, 5)))
    bad = ToyModelSpec((_linear("w0"), _linear("w0")), 6)
    with pytest.raises(ValueError, match="expects 6 inputs but receives 5"):
        forward(bad, ckpt, np.ones((1, 6)))
    with pytest.raises(ValueError, match="missing weight"):
        forward(ToyModelSpec((_linear("nope"),), 6), ckpt, np.ones((1, 6)))
    with pytest.raises(ValueError):
        LayerSpec("tanh")
    with pytest.raises(ValueError):
        LayerSpec("linear")


def test_spec_dict_round_trip():
    spec, _ = _mlp()
    assert ToyModelSpec.from_dict(spec.to_dict()) == spec


def test_norm_examples():
    spec = ToyModelSpec((_linear("w"),), 2)
    ckpt = Checkpoint.from_arrays({"w": np.eye(2)})
    stats = accumulate_norms(spec, ckpt, [np.ones((1, 2))])
    np.testing.assert_array_equal(stats["w"].norms, [1.0, 1.0])
    stats = accumulate_norms(spec, ckpt, [np.array([[3.0, 0.0]]), np.array([[4.0, 0.0]])])
    np.testing.assert_array_equal(stats["w"].norms, [5.0, 0.0])
    assert stats["w"].rows_seen == 2


def test_norms_match_column_norm_oracle():
    spec, ckpt = _mlp(3)
    x = np.random.default_rng(4).normal(size=(100, 6))
    stats = accumulate_norms(spec, ckpt, iter_batches(x, 7))
    inputs = forward(spec, ckpt, x).layer_inputs
    for name, acts in inputs.items():
        oracle = [math.sqrt(sum(v * v for v in col)) for col in acts.T.tolist()]
        np.testing.assert_allclose(stats[name].norms, oracle, rtol=1e-6)
        assert stats[name].rows_seen == 100


def test_norm_invariants():
    spec, ckpt = _mlp(5)
    x = np.random.default_rng(6).normal(size=(64, 6))
    a = accumulate_norms(spec, ckpt, iter_batches(x, 8))
    b = accumulate_norms(spec, ckpt, iter_batches(x, 8))
    perm = accumulate_norms(spec, ckpt, iter_batches(x[np.random.default_rng(0).permutation(64)], 8))
    threaded = accumulate_norms(spec, ckpt, iter_batches(x, 8), threads=4, deterministic=False)
    for name in a:
        assert np.array_equal(a[name].sq_sum, b[name].sq_sum)
        np.testing.assert_allclose(perm[name].norms, a[name].norms, rtol=1e-6)
        np.testing.assert_allclose(threaded[name].norms, a[name].norms, rtol=1e-6)
    # first layer sees the raw input, so its norms scale linearly
    scaled = accumulate_norms(spec, ckpt, iter_batches(x * 3.0, 8))
    np.testing.assert_allclose(scaled["w0"].norms, 3.0 * a["w0"].norms, rtol=1e-12)


def test_empty_stream_rejected():
    spec, ckpt = _mlp()
    with pytest.raises(ValueError, match="empty"):
        accumulate_norms(spec, ckpt, [])
    with pytest.raises(ValueError, match="empty"):
        accumulate_norms(spec, ckpt, [np.zeros((0, 6))])


def test_divergence_examples():
    spec, ckpt = _mlp(7)
    x = np.random.default_rng(8).normal(size=(10, 6))
    assert output_divergence(spec, ckpt, ckpt, x) == {"mean_rel_l2": 0.0, "max_rel_l2": 0.0}
    # zero every weight and bias of the last layer: pruned output is 0
    zeroed = ckpt.replace({n: ckpt[n].with_data(np.zeros(ckpt[n].shape)) for n in ("w2", "b2")})
    d = output_divergence(spec, ckpt, zeroed, x)
    assert d["mean_rel_l2"] == pytest.approx(1.0) and d["max_rel_l2"] == pytest.approx(1.0)


def test_divergence_grows_with_sparsity():
    from prunekit.manifest import IMAGE_GENERATOR
    from prunekit.pipeline import prune_checkpoint

    fx = make_toy_fixture(42)
    lo = prune_checkpoint(fx.checkpoint, fx.manifest, {IMAGE_GENERATOR: 0.1}).checkpoint
    hi = prune_checkpoint(fx.checkpoint, fx.manifest, {IMAGE_GENERATOR: 0.9}).checkpoint
    d_lo = output_divergence(fx.spec, fx.checkpoint, lo, fx.calibration)
    d_hi = output_divergence(fx.spec, fx.checkpoint, hi, fx.calibration)
    assert d_hi["mean_rel_l2"] > d_lo["mean_rel_l2"]


def test_divergence_shape_mismatch():
    spec, ckpt = _mlp()
    other = Checkpoint.from_arrays({**{t.name: t.data for t in ckpt}, "b0": np.zeros(4)})
    with pytest.raises(ValueError):
        output_divergence(spec, ckpt, other, np.ones((1, 6)))


def test_calibration_file(tmp_path):
    data = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
    path = tmp_path / "c.bin"
    write_calibration(path, data)
    blob = path.read_bytes()
    assert blob[:4] == b"CALB"
    assert struct.unpack("<II", blob[4:12]) == (5, 3)
    assert blob[12:16] == b"\0\0\0\0"
    assert len(blob) == 16 + 5 * 3 * 4
    np.testing.assert_array_equal(read_calibration(path), data)

    path.write_bytes(blob[:-4])
    with pytest.raises(ValueError, match="payload"):
        read_calibration(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="magic"):
        read_calibration(path)


def test_norms_file_round_trip(tmp_path):
    spec, ckpt = _mlp(9)
    stats = accumulate_norms(spec, ckpt, [np.random.default_rng(1).normal(size=(13, 6))])
    path = tmp_path / "n.json"
    write_norms(stats, path)
    back = read_norms(path)
    for name in stats:
        assert np.array_equal(back[name].norms, stats[name].norms)
        assert back[name].rows_seen == 13
    assert norms_to_dict(norms_from_dict(norms_to_dict(stats))) == norms_to_dict(stats)
