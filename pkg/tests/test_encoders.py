import numpy as np
import pytest

from cirlite import autodiff as ad
from cirlite import encoders as enc
from cirlite import layers as ly
from cirlite.autodiff import Tensor

RNG = np.random.default_rng

CFG = enc.EncoderConfig(depth=2, d=8, heads=2, patch=4, vocab_size=12, max_len=10)


def tokens(*ids):
    return enc.TokenSequence(tuple(ids))


def pooled(t: Tensor) -> np.ndarray:
    v = t.data.mean(axis=0)
    return v / np.linalg.norm(v)


def test_patchify_counts_and_shape():
    grid = enc.patchify(np.zeros((8, 8, 1)), 4)
    assert (grid.grid_h, grid.grid_w) == (2, 2)
    assert grid.patches.shape == (4, 16)


def test_patchify_constant_image_gives_identical_patches():
    grid = enc.patchify(np.full((8, 8, 3), 0.25), 4)
    assert np.all(grid.patches.data == grid.patches.data[0])


def test_patchify_round_trips_bit_exactly():
    img = RNG(0).random((8, 8, 3))
    grid = enc.patchify(img, 4)
    assert np.array_equal(enc.unpatchify(grid, 4, 3), img)


def test_patchify_rejects_indivisible_images():
    with pytest.raises(ValueError, match="divisible"):
        enc.patchify(np.zeros((9, 8, 3)), 4)


def test_patchify_row_major_flat_index():
    # cell (r, c) of the patch grid must land at flat index r*grid_w + c
    img = np.zeros((8, 8, 1))
    img[4:8, 0:4] = 7.0  # spatial cell (1, 0)
    grid = enc.patchify(img, 4)
    assert np.all(grid.patches.data[1 * 2 + 0] == 7.0)
    assert np.all(grid.patches.data[[0, 1, 3]] == 0.0)


def test_visual_encode_shapes():
    rng = RNG(1)
    params = enc.init_visual_encoder(rng, CFG, channels=1)
    bundle = enc.visual_encode(enc.patchify(rng.random((8, 8, 1)), 4), params)
    assert bundle.local.shape == (4, 8)
    assert bundle.global_.shape == (4, 8)
    assert bundle.modality == "visual"
    assert bundle.grid == (2, 2)


def test_visual_encode_rejects_width_mismatch():
    params = enc.init_visual_encoder(RNG(2), CFG, channels=1)
    grid = enc.patchify(np.zeros((8, 8, 3)), 4)  # 48 floats per patch, params expect 16
    with pytest.raises(ValueError, match="width"):
        enc.visual_encode(grid, params)


def test_visual_encode_zero_weights_ignores_image():
    params = enc.init_visual_encoder(RNG(3), CFG, channels=1)
    for _, t in ly.named_tensors(params):
        if t.ndim == 2:  # zero every weight matrix, keep biases/norm params
            t.data[...] = 0.0
    rng = RNG(4)
    a = enc.visual_encode(enc.patchify(rng.random((8, 8, 1)), 4), params)
    b = enc.visual_encode(enc.patchify(rng.random((8, 8, 1)), 4), params)
    assert np.array_equal(a.local.data, b.local.data)
    assert np.array_equal(a.global_.data, b.global_.data)
    assert np.allclose(a.local.data, a.local.data[0])  # broadcast rows


def test_visual_encode_is_permutation_equivariant():
    rng = RNG(5)
    params = enc.init_visual_encoder(rng, CFG, channels=1)
    img = rng.random((8, 8, 1))
    grid = enc.patchify(img, 4)
    perm = np.array([2, 0, 3, 1])
    shuffled = enc.PatchGrid(grid.grid_h, grid.grid_w, grid.patch_dim,
                             Tensor(grid.patches.data[perm]))
    direct = enc.visual_encode(shuffled, params)
    base = enc.visual_encode(grid, params)
    assert np.allclose(direct.local.data, base.local.data[perm], atol=1e-10)
    assert np.allclose(direct.global_.data, base.global_.data[perm], atol=1e-10)


def test_text_encode_shapes_and_determinism():
    params = enc.init_text_encoder(RNG(6), CFG)
    seq = tokens(0, 5, 7, 3, 1)
    a = enc.text_encode(seq, params)
    b = enc.text_encode(tokens(0, 5, 7, 3, 1), params)
    assert a.local.shape == (5, 8) and a.global_.shape == (5, 8)
    assert a.modality == "textual" and a.grid is None
    assert np.array_equal(a.local.data, b.local.data)
    assert np.array_equal(a.global_.data, b.global_.data)


def test_text_encode_rejects_out_of_vocabulary():
    params = enc.init_text_encoder(RNG(7), CFG)
    with pytest.raises(ValueError, match="vocabulary"):
        enc.text_encode(tokens(0, 99, 1), params)


def test_text_encode_rejects_overlong_sequences():
    params = enc.init_text_encoder(RNG(8), CFG)
    with pytest.raises(ValueError, match="length"):
        enc.text_encode(tokens(*range(11)), params)


def test_text_encode_swapping_tokens_moves_global():
    params = enc.init_text_encoder(RNG(9), CFG)
    a = enc.text_encode(tokens(0, 5, 7, 1), params)
    b = enc.text_encode(tokens(0, 7, 5, 1), params)
    cos = float(pooled(a.global_) @ pooled(b.global_))
    assert cos < 1 - 1e-6


def test_local_differs_from_global():
    rng = RNG(10)
    vis = enc.init_visual_encoder(rng, CFG, channels=1)
    bundle = enc.visual_encode(enc.patchify(rng.random((8, 8, 1)), 4), vis)
    cos = float(pooled(bundle.local) @ pooled(bundle.global_))
    assert cos < 1 - 1e-6

    txt = enc.init_text_encoder(rng, CFG)
    tb = enc.text_encode(tokens(0, 4, 9, 2, 1), txt)
    cos = float(pooled(tb.local) @ pooled(tb.global_))
    assert cos < 1 - 1e-6


@pytest.mark.parametrize("which", ["visual", "textual"])
def test_gradients_reach_every_parameter(which):
    rng = RNG(11)
    if which == "visual":
        params = enc.init_visual_encoder(rng, CFG, channels=1)
        bundle = enc.visual_encode(enc.patchify(rng.random((8, 8, 1)), 4), params)
    else:
        params = enc.init_text_encoder(rng, CFG)
        bundle = enc.text_encode(tokens(0, 5, 7, 3, 1), params)
    w1 = Tensor(rng.standard_normal(bundle.local.shape))
    w2 = Tensor(rng.standard_normal(bundle.global_.shape))
    loss = ad.add(ad.tensor_sum(ad.mul(bundle.local, w1)),
                  ad.tensor_sum(ad.mul(bundle.global_, w2)))
    ad.backward(loss)
    for name, t in ly.named_tensors(params):
        assert t.grad is not None, f"{name} got no gradient"
        assert np.any(t.grad != 0), f"{name} gradient identically zero"


def test_encoder_config_validation():
    with pytest.raises(ValueError, match="depth"):
        enc.EncoderConfig(depth=1, d=8, heads=2)
    with pytest.raises(ValueError, match="divisible"):
        enc.EncoderConfig(depth=2, d=8, heads=3)


def test_token_sequence_needs_markers():
    with pytest.raises(ValueError, match="marker"):
        enc.TokenSequence((0,))
    assert tokens(0, 4, 4, 1).content == (4, 4)


def test_feature_bundle_validation():
    t = Tensor(np.ones((4, 2)))
    with pytest.raises(ValueError, match="grid"):
        enc.FeatureBundle(local=t, global_=t, modality="visual", grid=(3, 2))
    with pytest.raises(ValueError, match="modality"):
        enc.FeatureBundle(local=t, global_=t, modality="audio")
    with pytest.raises(ValueError, match="finite"):
        enc.FeatureBundle(local=Tensor(np.full((2, 2), np.nan)),
                          global_=Tensor(np.ones((2, 2))), modality="textual")
