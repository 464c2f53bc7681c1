"""Attention algebra: logits, row products, masks, range limits, cost model."""

import numpy as np
import pytest

from pamstereo import Tape, Tensor
from pamstereo.attention import (
    AttentionMap,
    CostVolumeSlice,
    ValidMask,
    attention_from_cost,
    attention_logits,
    clean_mask,
    complexity_estimate,
    complexity_table,
    compose_attention,
    disparity_range_mask,
    geo_matmul,
    identity_attention,
    shift_attention,
    valid_mask,
)
from pamstereo.optim import grad_check
from pamstereo.ops import softmax_lastdim
import oracles


def random_stochastic(rng, b, h, w):
    m = rng.uniform(0.1, 1.0, size=(b, h, w, w))
    return m / m.sum(axis=-1, keepdims=True)


# -- attention_logits ---------------------------------------------------------

def test_logits_constant_similarity_per_row(rng):
    # one-hot channel vectors, constant along the row -> equal logits per row
    q = np.zeros((1, 3, 2, 4))
    q[:, 1] = 1.0
    out = attention_logits(Tensor(q), Tensor(q))
    assert np.allclose(out.data.data, 1.0)


def test_logits_single_channel_product():
    q = np.full((1, 1, 3, 4), 2.0)
    k = np.full((1, 1, 3, 4), 3.0)
    out = attention_logits(Tensor(q), Tensor(k))
    assert np.allclose(out.data.data, 6.0)


def test_logits_match_loop_oracle(rng):
    q = rng.normal(size=(1, 4, 3, 5))
    k = rng.normal(size=(1, 4, 3, 5))
    got = attention_logits(Tensor(q), Tensor(k))
    assert np.allclose(got.data.data, oracles.attention_logits_oracle(q, k), atol=1e-12)


def test_logits_shape_mismatch(rng):
    with pytest.raises(ValueError):
        attention_logits(Tensor(rng.normal(size=(1, 2, 3, 4))),
                         Tensor(rng.normal(size=(1, 2, 3, 5))))


def test_logits_gradcheck(rng):
    k = rng.normal(size=(1, 2, 2, 4))
    err = grad_check(lambda t: (attention_logits(t, Tensor(k)).data ** 2).sum(),
                     Tensor(rng.normal(size=(1, 2, 2, 4))))
    assert err < 1e-6


# -- geo_matmul ----------------------------------------------------------------

def test_geo_matmul_identity(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    eye = identity_attention(2, 4, 5)
    out = geo_matmul(eye, Tensor(x))
    assert np.array_equal(out.data, x)


def test_geo_matmul_permutation_swaps():
    m = np.zeros((1, 1, 2, 2))
    m[0, 0] = [[0.0, 1.0], [1.0, 0.0]]
    x = np.array([[[[3.0, 7.0]]]])
    out = geo_matmul(AttentionMap(Tensor(m), "r2l"), Tensor(x))
    assert np.allclose(out.data[0, 0, 0], [7.0, 3.0])


def test_geo_matmul_matches_loop_oracle(rng):
    m = random_stochastic(rng, 1, 3, 5)
    x = rng.normal(size=(1, 2, 3, 5))
    got = geo_matmul(AttentionMap(Tensor(m), "r2l"), Tensor(x))
    assert np.allclose(got.data, oracles.geo_matmul_oracle(m, x), atol=1e-12)


def test_geo_matmul_is_linear(rng):
    m = AttentionMap(Tensor(random_stochastic(rng, 1, 3, 4)), "r2l")
    x = Tensor(rng.normal(size=(1, 2, 3, 4)))
    y = Tensor(rng.normal(size=(1, 2, 3, 4)))
    lhs = geo_matmul(m, 2.0 * x + 3.0 * y)
    rhs = 2.0 * geo_matmul(m, x) + 3.0 * geo_matmul(m, y)
    assert np.allclose(lhs.data, rhs.data, atol=1e-6)


def test_geo_matmul_gradcheck(rng):
    m = random_stochastic(rng, 1, 2, 4)
    err = grad_check(
        lambda t: (geo_matmul(AttentionMap(Tensor(m), "r2l"), t) ** 2).sum(),
        Tensor(rng.normal(size=(1, 2, 2, 4))))
    assert err < 1e-6


# -- compose_attention ------------------------------------------------------------

def test_compose_identities():
    a = identity_attention(1, 2, 4, direction="r2l")
    b = identity_attention(1, 2, 4, direction="l2r")
    out = compose_attention(a, b)
    assert np.allclose(out.data.data, a.data.data)


def test_compose_permutation_transpose_is_identity(rng):
    w = 6
    perm = rng.permutation(w)
    p = np.zeros((1, 2, w, w))
    p[:, :, np.arange(w), perm] = 1.0
    pt = np.swapaxes(p, 2, 3)
    out = compose_attention(AttentionMap(Tensor(p), "r2l"),
                            AttentionMap(Tensor(pt.copy()), "l2r"))
    eye = identity_attention(1, 2, w)
    assert np.array_equal(out.data.data, eye.data.data)


def test_compose_matches_loop_oracle_rows_stochastic(rng):
    a = random_stochastic(rng, 1, 2, 5)
    b = random_stochastic(rng, 1, 2, 5)
    out = compose_attention(AttentionMap(Tensor(a), "r2l"),
                            AttentionMap(Tensor(b), "l2r"))
    assert np.allclose(out.data.data, oracles.compose_oracle(a, b), atol=1e-12)
    assert np.allclose(out.data.data.sum(axis=-1), 1.0, atol=1e-5)
    out.validate()


def test_compose_requires_opposite_directions(rng):
    a = AttentionMap(Tensor(random_stochastic(rng, 1, 2, 3)), "r2l")
    with pytest.raises(ValueError):
        compose_attention(a, a)


def test_compose_gradcheck(rng):
    b = random_stochastic(rng, 1, 2, 3)

    def f(t):
        m1 = AttentionMap(softmax_lastdim(t), "r2l")
        m2 = AttentionMap(Tensor(b), "l2r")
        return (compose_attention(m1, m2).data ** 2).sum()

    err = grad_check(f, Tensor(rng.normal(size=(1, 2, 3, 3))))
    assert err < 1e-6


# -- valid_mask / clean_mask ---------------------------------------------------------

def test_valid_mask_identity_all_ones():
    m = identity_attention(1, 3, 5, direction="l2r")
    v = valid_mask(m, tau=0.1)
    assert v.side == "left"
    assert np.all(v.data.data == 1.0)


def test_valid_mask_zero_column_invalid(rng):
    w = 5
    m = random_stochastic(rng, 1, 2, w)
    m[:, :, :, 2] = 0.0
    m = m / m.sum(axis=-1, keepdims=True)
    v = valid_mask(AttentionMap(Tensor(m), "l2r"), tau=0.1)
    assert np.all(v.data.data[:, :, :, 2] == 0.0)


def test_valid_mask_threshold_strict():
    # column mass 0.05 with tau 0.1 -> invalid
    w = 4
    m = np.full((1, 1, w, w), 0.0)
    m[:, :, :, 0] = 0.95
    m[:, :, :, 1] = 0.05 / w  # column 1 sums to 0.05
    m[:, :, :, 2] = 1.0 - m[:, :, :, :2].sum(axis=-1)
    v = valid_mask(AttentionMap(Tensor(m), "l2r"), tau=0.1)
    assert np.all(v.data.data[:, :, :, 1] == 0.0)
    assert np.all(v.data.data[:, :, :, 0] == 1.0)


def test_valid_mask_monotone_in_tau(rng):
    m = AttentionMap(Tensor(random_stochastic(rng, 1, 4, 6)), "l2r")
    taus = [0.05, 0.1, 0.5, 1.0, 2.0]
    counts = [valid_mask(m, t).count() for t in taus]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_valid_mask_tau_domain(rng):
    m = AttentionMap(Tensor(random_stochastic(rng, 1, 2, 4)), "l2r")
    with pytest.raises(ValueError):
        valid_mask(m, tau=0.0)
    with pytest.raises(ValueError):
        valid_mask(m, tau=4.0)


def test_clean_mask_solid_field_unchanged():
    v = ValidMask(Tensor(np.ones((1, 1, 6, 6))), side="left")
    out = clean_mask(v)
    assert np.all(out.data.data == 1.0)


def test_clean_mask_fills_single_hole():
    m = np.ones((1, 1, 7, 7))
    m[0, 0, 3, 3] = 0.0
    out = clean_mask(ValidMask(Tensor(m), side="left"))
    assert np.all(out.data.data == 1.0)


def test_clean_mask_matches_loop_oracle(rng):
    m = (rng.uniform(size=(2, 1, 8, 9)) > 0.5).astype(float)
    got = clean_mask(ValidMask(Tensor(m), side="right"))
    for b in range(2):
        want = oracles.open_close_oracle(m[b, 0])
        assert np.array_equal(got.data.data[b, 0], want)
    assert set(np.unique(got.data.data)) <= {0.0, 1.0}


# -- disparity_range_mask ---------------------------------------------------------------

def test_range_mask_full_range_keeps_all_candidates(rng):
    # d_max = W-1 admits every nonnegative-disparity candidate (k <= j);
    # negative-disparity positions are always excluded.
    c = CostVolumeSlice(Tensor(rng.normal(size=(1, 2, 6, 6))))
    out = disparity_range_mask(c, 5, "r2l")
    tril = np.tril_indices(6)
    for b in range(1):
        for i in range(2):
            assert np.allclose(out.data.data[b, i][tril], c.data.data[b, i][tril])
    assert np.all(out.data.data[:, :, 0, 1] < -1e8)


def test_range_mask_zero_keeps_diagonal_only(rng):
    c = CostVolumeSlice(Tensor(rng.normal(size=(1, 2, 5, 5))))
    m = attention_from_cost(c, "r2l", d_max=0)
    eye = np.eye(5)
    assert np.allclose(m.data.data, np.broadcast_to(eye, m.shape), atol=1e-12)


def test_range_mask_allowed_columns_enumerated(rng):
    W, d_max, j = 8, 5, 7
    c = CostVolumeSlice(Tensor(rng.normal(size=(1, 1, W, W))))
    m = attention_from_cost(c, "r2l", d_max=d_max)
    allowed = [k for k in range(W) if 0 <= j - k <= d_max]
    assert allowed == [2, 3, 4, 5, 6, 7]
    row = m.data.data[0, 0, j]
    assert np.all(row[allowed] > 0)
    blocked = [k for k in range(W) if k not in allowed]
    assert np.allclose(row[blocked], 0.0)


def test_range_mask_l2r_direction(rng):
    W, d_max = 6, 2
    c = CostVolumeSlice(Tensor(np.zeros((1, 1, W, W))))
    m = attention_from_cost(c, "l2r", d_max=d_max)
    for j in range(W):
        for k in range(W):
            expect = 0 <= k - j <= d_max
            assert (m.data.data[0, 0, j, k] > 0) == expect


def test_range_mask_domain_errors(rng):
    c = CostVolumeSlice(Tensor(rng.normal(size=(1, 1, 4, 4))))
    with pytest.raises(ValueError):
        disparity_range_mask(c, 4, "r2l")
    with pytest.raises(ValueError):
        disparity_range_mask(c, -1, "r2l")


# -- complexity model ----------------------------------------------------------------------

def test_complexity_flops_ratio_c12():
    pam = complexity_estimate("pam_block", 135, 240, 12, 48)
    c3d = complexity_estimate("conv3d", 135, 240, 12, 48)
    assert abs(c3d.flops / pam.flops - 16.2) < 0.05


def test_complexity_flops_and_memory_ratio_c32():
    pam = complexity_estimate("pam_block", 135, 240, 32, 48)
    c3d = complexity_estimate("conv3d", 135, 240, 32, 48)
    assert abs(c3d.flops / pam.flops - 23.5) <= 0.1
    assert abs(c3d.memory / pam.memory - 2.1) <= 0.1


def test_complexity_memory_comparable_c12():
    pam = complexity_estimate("pam_block", 135, 240, 12, 48)
    c3d = complexity_estimate("conv3d", 135, 240, 12, 48)
    assert abs(c3d.memory / pam.memory - 1.0) < 0.05


def test_complexity_positive_counts_tiny_config():
    for kind in ("pam_block", "conv3d"):
        r = complexity_estimate(kind, 1, 1, 1, 1)
        assert r.params > 0 and r.flops > 0 and r.memory > 0


def test_complexity_table_renders_columns():
    txt = complexity_table(135, 240, 12, 48)
    assert "Params" in txt and "FLOPs" in txt and "Memory" in txt
    assert "16.2" in txt


# -- fixtures for shifted scenes -----------------------------------------------------------

def test_shift_attention_regression_target():
    m = shift_attention(1, 2, 12, shift=5, direction="r2l")
    d = oracles.regress_disparity_oracle(m.data.data)
    assert np.allclose(d[0, 0, :, 5:], 5.0)
