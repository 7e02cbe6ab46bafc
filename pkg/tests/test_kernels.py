import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunekit.container import Tensor, tensor_stats
from prunekit.kernels import (
    PER_ROW,
    PER_TENSOR,
    PruneMask,
    apply_mask,
    magnitude_scores,
    masks_from_dict,
    masks_to_dict,
    prune_count,
    prune_layer,
    rle_decode,
    rle_encode,
    select_prune_mask,
    wanda_scores,
)


def oracle_mask(scores, sparsity, group):
    """Sort (score, index) pairs in plain Python and take the first k per group."""
    arr = np.asarray(scores)
    rows = [arr.ravel().tolist()] if group == PER_TENSOR else arr.reshape(arr.shape[0], -1).tolist()
    out = []
    for row in rows:
        n = len(row)
        k = math.floor(sparsity * n + 0.5)
        chosen = set(sorted(range(n), key=lambda i: (row[i], i))[:k])
        out.append([i in chosen for i in range(n)])
    return np.array(out, dtype=bool).reshape(arr.shape)


def test_magnitude_scores_examples():
    np.testing.assert_array_equal(
        magnitude_scores(Tensor("w", [0.1, -0.5, 0.3, -0.2])), np.abs(np.float32([0.1, -0.5, 0.3, -0.2]))
    )
    assert not magnitude_scores(np.zeros(5)).any()


def test_magnitude_scores_match_elementwise_abs():
    w = Tensor("w", np.random.default_rng(1).normal(size=(17, 9)))
    s = magnitude_scores(w)
    for idx in np.ndindex(w.shape):
        assert s[idx] == abs(float(w.data[idx]))


def test_wanda_example():
    scores = wanda_scores(np.array([[1.0, 2.0]]), np.array([3.0, 1.0]))
    np.testing.assert_array_equal(scores, [[3.0, 2.0]])
    _, mask = prune_layer(Tensor("w", [[1.0, 2.0]]), "wanda", 0.5, norms=[3.0, 1.0])
    # the larger weight loses because its input is quiet
    np.testing.assert_array_equal(mask.pruned, [[False, True]])


def test_wanda_matches_double_loop():
    rng = np.random.default_rng(8)
    w = rng.normal(size=(8, 8)).astype(np.float32)
    norms = rng.random(8).astype(np.float32).astype(np.float64)
    s = wanda_scores(w, norms)
    for i in range(8):
        for j in range(8):
            assert s[i, j] == abs(float(w[i, j])) * float(norms[j])


def test_wanda_dimension_mismatch():
    with pytest.raises(ValueError, match="length 3"):
        wanda_scores(np.ones((2, 2)), np.ones(3))
    with pytest.raises(ValueError, match="rank-2"):
        wanda_scores(np.ones((2, 2, 2)), np.ones(2))
    with pytest.raises(ValueError):
        wanda_scores(np.ones((2, 2)), [1.0, -1.0])


def test_uniform_norms_give_magnitude_ranking():
    w = np.random.default_rng(2).normal(size=(6, 10))
    a = select_prune_mask(wanda_scores(w, np.full(10, 2.5)), 0.4, PER_ROW)
    b = select_prune_mask(magnitude_scores(w), 0.4, PER_ROW)
    assert a == b


def test_select_examples():
    m = select_prune_mask([0.1, 0.5, 0.3, 0.2], 0.5, PER_TENSOR)
    assert set(np.flatnonzero(m.pruned)) == {0, 3}
    assert not select_prune_mask([1, 2, 3], 0.0).pruned.any()
    assert select_prune_mask([1, 2, 3], 1.0).pruned.all()
    m = select_prune_mask(np.ones(8), 0.25)
    assert set(np.flatnonzero(m.pruned)) == {0, 1}


def test_select_rejects_bad_sparsity():
    with pytest.raises(ValueError):
        select_prune_mask([1.0], 1.5)
    with pytest.raises(ValueError):
        select_prune_mask([1.0], -0.1)


def test_prune_count_is_round_half_up():
    assert prune_count(0.625, 1000) == 625
    assert prune_count(0.5, 5) == 3
    assert prune_count(0.1, 5) == 1
    assert prune_count(0.25, 2) == 1
    assert prune_count(0.0, 7) == 0 and prune_count(1.0, 7) == 7


@pytest.mark.parametrize("group", [PER_TENSOR, PER_ROW])
def test_select_matches_oracle(group):
    rng = np.random.default_rng(11)
    for case in range(300):
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 30)))
        scores = rng.random(shape)
        if case % 3 == 0:
            scores = np.round(scores * 4) / 4  # heavy ties
        s = float(rng.choice(np.linspace(0, 1, 11)))
        assert np.array_equal(select_prune_mask(scores, s, group).pruned, oracle_mask(scores, s, group))


def test_per_row_counts():
    m = select_prune_mask(np.random.default_rng(4).random((5, 7)), 0.5, PER_ROW)
    assert m.counts() == [4] * 5


def test_apply_mask():
    w = Tensor("w", [[1.0, -2.0], [3.0, 4.0]])
    full = PruneMask(np.ones((2, 2), bool))
    assert not apply_mask(w, full).data.any()
    assert apply_mask(w, PruneMask(np.zeros((2, 2), bool))) == w
    m = select_prune_mask(magnitude_scores(w), 0.5)
    out = apply_mask(w, m)
    assert tensor_stats(out).sparsity >= 0.5
    assert apply_mask(out, m) == out
    np.testing.assert_array_equal(w.data, [[1.0, -2.0], [3.0, 4.0]])
    with pytest.raises(ValueError, match="shape"):
        apply_mask(w, PruneMask(np.zeros(4, bool)))


def test_prune_layer_contracts():
    w = Tensor("w", np.random.default_rng(5).normal(size=(4, 5)))
    t, m = prune_layer(w, "magnitude", 0.0)
    assert t == w and m.popcount() == 0
    conv = Tensor("conv", np.ones((2, 2, 3, 3)))
    with pytest.raises(ValueError, match="wanda requires rank-2 weights"):
        prune_layer(conv, "wanda", 0.5, norms=np.ones(2))
    with pytest.raises(ValueError, match="norms"):
        prune_layer(w, "wanda", 0.5)
    with pytest.raises(ValueError, match="unknown method"):
        prune_layer(w, "sparsegpt", 0.5)


def test_prune_layer_625_on_1000():
    w = Tensor("w", np.random.default_rng(6).normal(size=1000))
    t, m = prune_layer(w, "magnitude", 0.625)
    assert tensor_stats(t).zeros - tensor_stats(w).zeros == 625
    assert m.popcount() == 625


def test_preexisting_zeros_go_first():
    w = Tensor("w", [0.0, 5.0, 0.0, 1.0])
    _, m = prune_layer(w, "magnitude", 0.5)
    np.testing.assert_array_equal(m.pruned, [True, False, True, False])


def test_conv_magnitude_per_row_groups_by_output_channel():
    w = Tensor("c", np.random.default_rng(9).normal(size=(4, 3, 3, 3)))
    _, m = prune_layer(w, "magnitude", 0.5, group=PER_ROW)
    assert m.counts() == [14] * 4


def test_rle_and_export_round_trip():
    flat = np.array([1, 1, 0, 0, 1, 0, 1, 1, 1], bool)
    assert rle_encode(flat) == [[0, 2], [4, 1], [6, 3]]
    np.testing.assert_array_equal(rle_decode(rle_encode(flat), 9), flat)
    assert rle_encode(np.zeros(3, bool)) == []
    masks = {
        "a": select_prune_mask(np.random.default_rng(0).random((3, 6)), 0.5, PER_ROW),
        "b": select_prune_mask(np.random.default_rng(1).random(10), 0.3),
    }
    d = masks_to_dict(masks)
    assert d["a"]["k"] == [3, 3, 3] and d["b"]["k"] == [3]
    back = masks_from_dict(d)
    assert back == masks


@settings(max_examples=80, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(1, 40),
    st.integers(0, 2**32 - 1),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
    st.floats(1e-3, 1e3),
    st.sampled_from([PER_TENSOR, PER_ROW]),
)
def test_selection_properties(rows, cols, seed, s1, s2, c, group):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random((rows, cols)) * 8) / 8
    lo, hi = sorted((s1, s2))
    m_lo = select_prune_mask(scores, lo, group)
    m_hi = select_prune_mask(scores, hi, group)
    n = cols if group == PER_ROW else rows * cols
    assert set(m_lo.counts()) <= {math.floor(lo * n + 0.5)}
    assert not (m_lo.pruned & ~m_hi.pruned).any()
    # argmin is unchanged by positive scaling, so the mask must be too
    assert select_prune_mask(scores * c, lo, group) == m_lo


def test_prune_layer_accepts_plain_arrays():
    W = np.array([[0.9, -0.1], [0.3, -0.8]], dtype=np.float32)
    out, mask = prune_layer(W, "magnitude", 0.5)
    assert out.data.tolist() == [[pytest.approx(0.9), 0.0], [0.0, pytest.approx(-0.8)]]
    assert mask.counts() == [2]
