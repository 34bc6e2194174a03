import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catmesh import layers
from catmesh.autodiff import Tape, ops
from catmesh.autodiff.fd import grad_error
from catmesh.encoder import (EncoderConfig, encoder_forward, encoder_specs, patchify, patchify_embed,
                             regress_body, regress_component_boxes)

TOY = EncoderConfig(H=16, W=8, M=4, C=8, B=3, depth=1, heads=2, head_hidden=16)


def toy_weights(cfg=TOY, seed=0, perturb=0.0):
    P = layers.init_params(encoder_specs(cfg), seed)
    if perturb:
        r = np.random.default_rng(seed + 1)
        P = {k: v + r.normal(scale=perturb, size=v.shape) for k, v in P.items()}
    return P


def test_token_count_at_input_resolution():
    cfg = EncoderConfig(H=256, W=192, M=16)
    assert cfg.n_patches == 192
    assert patchify(np.zeros((1, 256, 192, 3)), 16).shape == (1, 192, 16 * 16 * 3)


def test_patch_order_is_row_major(rng):
    img = rng.normal(size=(1, 16, 8, 3))
    p = patchify(img, 4)
    np.testing.assert_array_equal(p[0, 0], img[0, :4, :4].ravel())
    np.testing.assert_array_equal(p[0, 1], img[0, :4, 4:8].ravel())
    np.testing.assert_array_equal(p[0, 2], img[0, 4:8, :4].ravel())


def test_zero_image_gives_bias_plus_position():
    P = toy_weights(perturb=0.1)
    out = patchify_embed(np.zeros((1, 16, 8, 3)), P, TOY).data[0]
    np.testing.assert_allclose(out, P["enc.patch.b"] + P["enc.pos"], atol=1e-15)


def test_swapping_patches_swaps_tokens(rng):
    P = toy_weights(perturb=0.1)
    img = rng.normal(size=(1, 16, 8, 3))
    swapped = img.copy()
    swapped[0, :4, :4], swapped[0, 8:12, 4:8] = img[0, 8:12, 4:8], img[0, :4, :4]
    a = patchify_embed(img, P, TOY, with_pos=False).data[0]
    b = patchify_embed(swapped, P, TOY, with_pos=False).data[0]
    np.testing.assert_array_equal(b[[5, 0]], a[[0, 5]])
    np.testing.assert_array_equal(np.delete(b, [0, 5], 0), np.delete(a, [0, 5], 0))


def test_image_shape_checked():
    with pytest.raises(ValueError):
        patchify_embed(np.zeros((1, 12, 8, 3)), toy_weights(), TOY)


@pytest.mark.parametrize("bad", [dict(M=5), dict(C=9), dict(B=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        EncoderConfig(**{**TOY.__dict__, **bad}).validate()


def test_encoder_shapes_and_attention_rows(rng):
    cfg = EncoderConfig(H=16, W=8, M=4, C=8, B=27, depth=2, heads=2)
    P = toy_weights(cfg, perturb=0.1)
    maps = []
    T_f, T_b = encoder_forward(patchify_embed(rng.normal(size=(2, 16, 8, 3)), P, cfg), P, cfg, maps)
    assert T_f.shape == (2, cfg.n_patches, 8)
    assert T_b.shape == (2, 27, 8)
    assert len(maps) == 2
    for a in maps:
        assert np.abs(a.sum(-1) - 1).max() < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_encoder_grad_wrt_body_tokens(seed):
    P = toy_weights(seed=seed, perturb=0.1)
    T_f = np.random.default_rng(seed).normal(size=(1, TOY.n_patches, 8))
    w = np.random.default_rng(7).normal(size=(1, TOY.n_patches + TOY.B, 8))

    def fn(tb):
        a, b = encoder_forward(T_f, {**P, "enc.body_tokens": tb}, TOY)
        return ops.sum(ops.mul(ops.concat([a, b], axis=1), w))

    assert grad_error(fn, [P["enc.body_tokens"]]) < 1e-4


def test_patch_permutation_equivariance_without_positions(rng):
    cfg = EncoderConfig(H=8, W=8, M=4, C=8, B=2, depth=2, heads=2)
    P = toy_weights(cfg, perturb=0.1)
    img = rng.normal(size=(1, 8, 8, 3))
    perm = np.array([2, 0, 3, 1])
    tiles = patchify(img, 4)[0]
    # rebuild an image whose patches are tiles[perm]
    shuffled = tiles[perm].reshape(2, 2, 4, 4, 3).transpose(0, 2, 1, 3, 4).reshape(1, 8, 8, 3)
    a, _ = encoder_forward(patchify_embed(img, P, cfg, with_pos=False), P, cfg)
    b, _ = encoder_forward(patchify_embed(shuffled, P, cfg, with_pos=False), P, cfg)
    np.testing.assert_allclose(b.data[0], a.data[0][perm], atol=1e-12)


def test_body_head_zero_init(rng):
    P = toy_weights()
    out = regress_body(rng.normal(size=(2, TOY.B, TOY.C)), P, TOY)
    assert out["theta_body"].shape == (2, 22, 3)
    assert out["beta"].shape == (2, 10)
    assert out["t"].shape == (2, 3)
    for v in out.values():
        assert np.all(v.data == 0)


def test_body_head_grad():
    P = toy_weights(perturb=0.1)
    T_b = np.random.default_rng(3).normal(size=(1, TOY.B, TOY.C))
    names = [k for k in P if k.startswith("body_head")]

    def fn(*vals):
        th = regress_body(T_b, {**P, **dict(zip(names, vals))}, TOY)["theta_body"]
        return ops.sum(ops.mul(th, th))

    assert grad_error(fn, [P[k] for k in names], max_coords=30) < 1e-4


def test_boxes_zero_init_are_centred(rng):
    boxes = regress_component_boxes(rng.normal(size=(2, TOY.n_patches, TOY.C)), toy_weights(), TOY).data
    assert boxes.shape == (2, 3, 4)
    np.testing.assert_allclose(boxes, 0.5, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 50.0))
def test_boxes_stay_in_unit_square(seed, scale):
    r = np.random.default_rng(seed)
    P = {k: r.normal(scale=scale, size=v.shape) for k, v in toy_weights().items()}
    boxes = regress_component_boxes(r.normal(scale=scale, size=(2, TOY.n_patches, TOY.C)), P, TOY).data
    assert np.all((boxes >= 0) & (boxes <= 1))


def test_box_loss_grad():
    P = toy_weights(perturb=0.2)
    T_f = np.random.default_rng(2).normal(size=(1, TOY.n_patches, TOY.C))
    target = np.random.default_rng(3).uniform(0.2, 0.8, size=(1, 3, 4))
    names = [k for k in P if k.startswith("box_head.lhand")]

    def fn(*vals):
        boxes = regress_component_boxes(T_f, {**P, **dict(zip(names, vals))}, TOY)
        return ops.mean(ops.abs(ops.sub(boxes, target)))

    assert grad_error(fn, [P[k] for k in names], max_coords=30) < 1e-4


def test_tape_and_plain_forward_agree(rng):
    P = toy_weights(perturb=0.1)
    x = patchify_embed(rng.normal(size=(1, 16, 8, 3)), P, TOY)
    plain = encoder_forward(x, P, TOY)[1].data
    tape = Tape()
    taped = encoder_forward(x, tape.watch_all(P), TOY)[1].data
    np.testing.assert_array_equal(plain, taped)
