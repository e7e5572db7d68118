import numpy as np
import pytest

from cirlite import attention as att
from cirlite import autodiff as ad
from cirlite.autodiff import Tensor

from oracles import (
    pyramid_cross_attention_ref,
    pyramid_pool_ref,
    pyramid_self_attention_ref,
    self_attention_ref,
    soft_gate_ref,
)

RNG = np.random.default_rng


def random_params(rng, d, heads):
    return att.init_attention(rng, d, heads, scale=0.5)


def as_np(params):
    return params.wq.data, params.wk.data, params.wv.data, params.wo.data


def test_pyramid_pool_empty_sum_is_zero():
    x = Tensor(RNG(0).standard_normal((4, 3)))
    out = att.pyramid_pool(x, att.PyramidConfig(1, 2, 2))
    assert np.array_equal(out.data, np.zeros((4, 3)))


def test_pyramid_pool_constant_grid():
    const = np.tile([1.5, -2.0], (9, 1))
    out = att.pyramid_pool(Tensor(const), att.PyramidConfig(3, 3, 3))
    assert np.allclose(out.data, 2 * const, atol=1e-12)


def test_pyramid_pool_window_enumeration_oracle():
    for seed in range(5):
        x = RNG(seed).standard_normal((9, 4))
        got = att.pyramid_pool(Tensor(x), att.PyramidConfig(3, 3, 3)).data
        assert np.allclose(got, pyramid_pool_ref(x, 3, 3, 3), atol=1e-12)


def test_three_by_three_window_means():
    x = RNG(3).standard_normal((9, 2))
    scale3_only = (att.pyramid_pool(Tensor(x), att.PyramidConfig(3, 3, 3)).data
                   - att.pyramid_pool(Tensor(x), att.PyramidConfig(2, 3, 3)).data)
    center = scale3_only[4]  # (1, 1): window covers all nine patches
    assert np.allclose(center, x.mean(axis=0), atol=1e-12)
    corner = scale3_only[0]  # (0, 0): only self plus three in-bounds neighbors
    assert np.allclose(corner, x[[0, 1, 3, 4]].mean(axis=0), atol=1e-12)


def test_single_patch_grid_pool_is_identity_times_scales():
    x = RNG(4).standard_normal((1, 6))
    out = att.pyramid_pool(Tensor(x), att.PyramidConfig(3, 1, 1)).data
    assert np.allclose(out, 2 * x, atol=1e-12)


def test_pyramid_pool_rejects_grid_mismatch():
    with pytest.raises(ValueError, match="grid"):
        att.pyramid_pool(Tensor(np.zeros((5, 2))), att.PyramidConfig(2, 2, 2))


def test_self_attention_single_token_is_value_projection():
    rng = RNG(5)
    params = random_params(rng, 4, 2)
    x = rng.standard_normal((1, 4))
    out = att.self_attention(Tensor(x), params)
    assert np.allclose(out.data, x @ params.wv.data @ params.wo.data, atol=1e-12)


def test_self_attention_identical_tokens_give_identical_rows():
    rng = RNG(6)
    params = random_params(rng, 4, 2)
    x = np.tile(rng.standard_normal(4), (3, 1))
    out = att.self_attention(Tensor(x), params).data
    assert np.allclose(out, out[0], atol=1e-12)


def test_self_attention_matches_single_head_oracle():
    rng = RNG(7)
    params = random_params(rng, 4, 1)
    x = rng.standard_normal((3, 4))
    got = att.self_attention(Tensor(x), params).data
    want = self_attention_ref(x, *as_np(params), heads=1)
    assert np.max(np.abs(got - want)) < 1e-12


def test_self_attention_matches_multi_head_oracle():
    rng = RNG(8)
    params = random_params(rng, 6, 3)
    x = rng.standard_normal((5, 6))
    got = att.self_attention(Tensor(x), params).data
    want = self_attention_ref(x, *as_np(params), heads=3)
    assert np.max(np.abs(got - want)) < 1e-12


def test_pyramid_self_attention_reduces_to_plain_when_np_1():
    rng = RNG(9)
    params = random_params(rng, 4, 2)
    x = rng.standard_normal((4, 4))
    plain = att.self_attention(Tensor(x), params).data
    pyr, _ = att.pyramid_self_attention(Tensor(x), params, att.PyramidConfig(1, 2, 2))
    assert np.max(np.abs(pyr.data - plain)) <= 1e-12


def test_pyramid_self_attention_matches_formula_oracle():
    rng = RNG(10)
    params = random_params(rng, 4, 1)
    x = rng.standard_normal((4, 4))
    got, _ = att.pyramid_self_attention(Tensor(x), params, att.PyramidConfig(2, 2, 2))
    want = pyramid_self_attention_ref(x, *as_np(params), heads=1, n_p=2, grid_h=2, grid_w=2)
    assert np.max(np.abs(got.data - want)) < 1e-12


def test_single_patch_pyramid_query_matches_oracle():
    rng = RNG(11)
    params = random_params(rng, 4, 1)
    x = rng.standard_normal((1, 4))
    got, _ = att.pyramid_self_attention(Tensor(x), params, att.PyramidConfig(3, 1, 1))
    want = pyramid_self_attention_ref(x, *as_np(params), heads=1, n_p=3, grid_h=1, grid_w=1)
    assert np.max(np.abs(got.data - want)) < 1e-12


def test_cross_attention_single_tokens_is_value_projection():
    rng = RNG(12)
    params = random_params(rng, 4, 1)
    q = rng.standard_normal((1, 4))
    kv = rng.standard_normal((1, 4))
    out, _ = att.cross_attention(Tensor(q), Tensor(kv), params,
                                 att.PyramidConfig(2, 1, 1))
    assert np.allclose(out.data, kv @ params.wv.data @ params.wo.data, atol=1e-12)


def test_cross_attention_np1_reduces_to_standard():
    rng = RNG(13)
    params = random_params(rng, 4, 2)
    q = rng.standard_normal((3, 4))
    kv = rng.standard_normal((4, 4))
    with_pyr, _ = att.cross_attention(Tensor(q), Tensor(kv), params,
                                      att.PyramidConfig(1, 2, 2))
    plain, _ = att.cross_attention(Tensor(q), Tensor(kv), params, None)
    assert np.max(np.abs(with_pyr.data - plain.data)) <= 1e-12


def test_cross_attention_matches_formula_oracle():
    rng = RNG(14)
    params = random_params(rng, 4, 1)
    q = rng.standard_normal((2, 4))
    kv = rng.standard_normal((4, 4))
    got, weights = att.cross_attention(Tensor(q), Tensor(kv), params,
                                       att.PyramidConfig(2, 2, 2))
    want = pyramid_cross_attention_ref(q, kv, *as_np(params), heads=1,
                                       n_p=2, grid_h=2, grid_w=2)
    assert np.max(np.abs(got.data - want)) < 1e-12
    assert weights.matrix.shape == (2, 4)


def test_attention_weight_rows_sum_to_one():
    rng = RNG(15)
    params = random_params(rng, 6, 3)
    x = rng.standard_normal((4, 6))
    q = rng.standard_normal((3, 6))
    _, w_self = att.pyramid_self_attention(Tensor(x), params, att.PyramidConfig(2, 2, 2))
    _, w_cross = att.cross_attention(Tensor(q), Tensor(x), params,
                                     att.PyramidConfig(2, 2, 2))
    for weights in (w_self, w_cross):
        m = weights.matrix.data
        assert np.all(m >= 0)
        assert np.max(np.abs(m.sum(axis=1) - 1.0)) <= 1e-9


def test_self_attention_is_permutation_equivariant():
    rng = RNG(16)
    params = random_params(rng, 6, 2)
    x = rng.standard_normal((5, 6))
    perm = rng.permutation(5)
    direct = att.self_attention(Tensor(x[perm]), params).data
    permuted = att.self_attention(Tensor(x), params).data[perm]
    assert np.max(np.abs(direct - permuted)) <= 1e-10


def test_pyramid_self_attention_breaks_permutation_equivariance():
    rng = RNG(17)
    params = random_params(rng, 4, 2)
    x = rng.standard_normal((4, 4))
    perm = np.array([1, 0, 2, 3])  # swap the top row cells of the 2x2 grid
    cfg = att.PyramidConfig(2, 2, 2)
    direct, _ = att.pyramid_self_attention(Tensor(x[perm]), params, cfg)
    base, _ = att.pyramid_self_attention(Tensor(x), params, cfg)
    assert np.max(np.abs(direct.data - base.data[perm])) > 1e-3


def test_soft_gate_zero_params_halves_reference():
    rng = RNG(18)
    r_q = rng.standard_normal((3, 4))
    r_r = rng.standard_normal((5, 4))
    out = att.soft_gate(Tensor(r_q), Tensor(r_r), Tensor(np.zeros((4, 4))))
    assert np.allclose(out.data, 0.5 * r_r, atol=1e-12)


def test_soft_gate_identical_query_rows_equal_single_row():
    rng = RNG(19)
    row = rng.standard_normal(4)
    r_r = rng.standard_normal((5, 4))
    wg = Tensor(rng.standard_normal((4, 4)))
    stacked = att.soft_gate(Tensor(np.tile(row, (3, 1))), Tensor(r_r), wg)
    single = att.soft_gate(Tensor(row[None, :]), Tensor(r_r), wg)
    assert np.allclose(stacked.data, single.data, atol=1e-12)


def test_soft_gate_matches_reference():
    rng = RNG(20)
    r_q = rng.standard_normal((3, 4))
    r_r = rng.standard_normal((5, 4))
    wg = rng.standard_normal((4, 4))
    got = att.soft_gate(Tensor(r_q), Tensor(r_r), Tensor(wg)).data
    assert np.allclose(got, soft_gate_ref(r_q, r_r, wg), atol=1e-12)


def test_soft_gate_gradients():
    rng = RNG(21)
    r_q = Tensor(rng.standard_normal((3, 4)))
    wg_np = rng.standard_normal((4, 4))
    weight = rng.standard_normal((5, 4))

    def loss_wrt_reference(t):
        return ad.tensor_sum(ad.mul(att.soft_gate(r_q, t, Tensor(wg_np)), Tensor(weight)))

    err = ad.grad_check(loss_wrt_reference, Tensor(rng.standard_normal((5, 4))), step=1e-5)
    assert err < 1e-5

    r_r = Tensor(rng.standard_normal((5, 4)))

    def loss_wrt_gate(t):
        return ad.tensor_sum(ad.mul(att.soft_gate(r_q, r_r, t), Tensor(weight)))

    err = ad.grad_check(loss_wrt_gate, Tensor(wg_np), step=1e-5)
    assert err < 1e-5


def test_attention_gradients_flow_through_pyramid_path():
    rng = RNG(22)
    params = random_params(rng, 4, 2)
    weight = rng.standard_normal((4, 4))
    cfg = att.PyramidConfig(3, 2, 2)

    def f(t):
        out, _ = att.pyramid_self_attention(t, params, cfg)
        return ad.tensor_sum(ad.mul(out, Tensor(weight)))

    err = ad.grad_check(f, Tensor(rng.standard_normal((4, 4))), step=1e-5)
    assert err < 1e-5


def test_params_reject_indivisible_heads():
    rng = RNG(23)
    with pytest.raises(ValueError, match="divisible"):
        att.init_attention(rng, 4, 3)


def test_params_reject_nonsquare_weights():
    t = Tensor(np.zeros((4, 4)))
    with pytest.raises(ValueError, match="square"):
        att.AttentionParams(wq=t, wk=t, wv=Tensor(np.zeros((4, 2))), wo=t, heads=2)


def test_attend_rejects_width_mismatch():
    rng = RNG(24)
    params = random_params(rng, 4, 2)
    with pytest.raises(ValueError, match="width"):
        att.cross_attention(Tensor(np.zeros((2, 6))), Tensor(np.zeros((3, 4))), params)


def test_pyramid_config_rejects_bad_np():
    with pytest.raises(ValueError, match="n_p"):
        att.PyramidConfig(0, 2, 2)
