import warnings

import numpy as np
import pytest

from catmesh import decoder as dec
from catmesh import layers
from catmesh.autodiff import ops
from catmesh.autodiff.fd import grad_error
from catmesh.body.smplx import rodrigues
from catmesh.body.template import MIRROR
from catmesh.decoder import DecoderConfig, DegenerateInputWarning
from oracles import deform_attn_loop, random_deform_config

TOY = DecoderConfig(scales=(1, 2), crop_h=3, crop_w=3, K_hand=4, K_face=5, n_blocks=1, n_points=2, heads=2,
                    head_hidden=16)
C = 16


def toy_weights(cfg=TOY, seed=0, perturb=0.0):
    P = layers.init_params(dec.decoder_specs(C, cfg), seed)
    if perturb:
        r = np.random.default_rng(seed + 1)
        P = {k: v + r.normal(scale=perturb, size=v.shape) for k, v in P.items()}
    return P


def _contract(out, seed=11):
    return ops.sum(ops.mul(out, np.random.default_rng(seed).normal(size=out.shape)))


# ---------------------------------------------------------------- deformable attention vs loop oracle

def test_deformable_attention_matches_loop_oracle():
    r = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        P, Q, V, ref, heads, n_points = random_deform_config(r)
        fast = dec.deformable_cross_attn(Q, V, ref, P, "ca", heads, n_points).data
        slow = deform_attn_loop(Q, V, ref, P, "ca", heads, n_points)
        worst = max(worst, np.abs(fast - slow).max())
    assert worst < 1e-10


def test_deformable_attention_degenerate_case(rng):
    Cp = 6
    P = {k: np.zeros(s) for k, (s, _) in dec.deform_attn_spec("ca", Cp, 1, 1, 1).items()}
    P["ca.value.w"] = P["ca.out.w"] = np.eye(Cp)
    V = rng.normal(size=(1, Cp, 5, 7))
    ref = rng.uniform(0, 1, (1, 4, 2))
    out = dec.deformable_cross_attn(rng.normal(size=(1, 4, Cp)), [V], ref, P, "ca", 1, 1).data
    want = ops.bilinear_sample(V, dec.to_pixels(ref, 5, 7)).data
    np.testing.assert_allclose(out, want, atol=1e-14)


def test_attention_weights_normalised():
    P, Q, V, ref, heads, n_points = random_deform_config(np.random.default_rng(5))
    trace = {}
    dec.deformable_cross_attn(Q, V, ref, P, "ca", heads, n_points, trace)
    A = trace["attn_weights"][0]
    assert (A >= 0).all()
    assert np.abs(A.sum(-1) - 1).max() < 1e-12


def test_deformable_attention_level_count_checked():
    P, Q, V, ref, heads, n_points = random_deform_config(np.random.default_rng(8))
    with pytest.raises(ValueError, match="levels"):
        dec.deformable_cross_attn(Q, V + V[:1], ref, P, "ca", heads, n_points)


def test_deformable_attention_level_permutation_invariant(rng):
    heads, n_points, L, Cp = 2, 3, 3, 8
    P = {k: rng.normal(scale=0.5, size=s) for k, (s, _) in dec.deform_attn_spec("ca", Cp, heads, L, n_points).items()}
    V = [rng.normal(size=(1, Cp, 4 * 2 ** l, 3 * 2 ** l)) for l in range(L)]
    Q, ref = rng.normal(size=(1, 5, Cp)), rng.uniform(0, 1, (1, 5, 2))
    perm = [2, 0, 1]
    Pp = dict(P)
    Pp["ca.off.w"] = P["ca.off.w"].reshape(Cp, heads, L, n_points, 2)[:, :, perm].reshape(Cp, -1)
    Pp["ca.off.b"] = P["ca.off.b"].reshape(heads, L, n_points, 2)[:, perm].reshape(-1)
    Pp["ca.attw.w"] = P["ca.attw.w"].reshape(Cp, heads, L, n_points)[:, :, perm].reshape(Cp, -1)
    Pp["ca.attw.b"] = P["ca.attw.b"].reshape(heads, L, n_points)[:, perm].reshape(-1)
    a = dec.deformable_cross_attn(Q, V, ref, P, "ca", heads, n_points).data
    b = dec.deformable_cross_attn(Q, [V[i] for i in perm], ref, Pp, "ca", heads, n_points).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_initial_offsets_form_ring():
    ring = dec.ring_offsets(heads=2, n_levels=3, n_points=4)
    np.testing.assert_allclose(np.linalg.norm(ring, axis=-1), 1.0)
    P = layers.init_params(dec.deform_attn_spec("ca", 8, 2, 3, 4), 0)
    assert not P["ca.attw.w"].any() and not P["ca.attw.b"].any()


# ---------------------------------------------------------------- upsampling and cropping

def test_upsample_shapes_and_identity(rng):
    cfg = DecoderConfig(scales=(1, 2, 4))
    P = layers.init_params(dec.decoder_specs(C, cfg), 0)
    fmap = rng.normal(size=(1, C, 16, 12))
    maps = dec.upsample_multiscale(fmap, P, cfg.scales)
    assert [m.shape[-2:] for m in maps] == [(16, 12), (32, 24), (64, 48)]
    assert all(m.shape[1] == C for m in maps)
    np.testing.assert_array_equal(maps[0].data, fmap)


def test_upsample_grad(rng):
    cfg = DecoderConfig(scales=(1, 2, 4))
    P = layers.init_params({k: v for k, v in dec.decoder_specs(4, cfg).items() if k.startswith("dec.up")}, 0)
    P = {k: v + rng.normal(scale=0.2, size=v.shape) for k, v in P.items()}
    names = list(P)

    def fn(x, *w):
        return ops.add(_contract(dec.upsample_multiscale(x, dict(zip(names, w)), cfg.scales)[2], 1),
                       _contract(dec.upsample_multiscale(x, dict(zip(names, w)), cfg.scales)[1], 2))

    assert grad_error(fn, [rng.normal(size=(1, 4, 3, 2))] + [P[k] for k in names], max_coords=25) < 1e-4


def test_roi_align_constant_map(rng):
    crop = dec.roi_align(np.full((2, 3, 6, 5), -1.25), rng.uniform(0.1, 0.9, (2, 4)), 4, 3).data
    np.testing.assert_allclose(crop, -1.25, atol=1e-15)


def test_roi_align_full_box_is_identity(rng):
    fmap = rng.normal(size=(1, 3, 6, 5))
    crop = dec.roi_align(fmap, np.array([[0.5, 0.5, 1.0, 1.0]]), 6, 5).data
    assert np.abs(crop - fmap).max() < 1e-6


def test_roi_align_degenerate_box_warns(rng):
    with pytest.warns(DegenerateInputWarning):
        out = dec.roi_align(rng.normal(size=(1, 2, 4, 4)), np.array([[0.5, 0.5, 0.0, 0.2]]), 2, 2)
    assert np.isfinite(out.data).all()


@pytest.mark.parametrize("seed", range(5))
def test_roi_align_grad_wrt_box(seed):
    r = np.random.default_rng(seed)
    fmap = r.normal(size=(1, 2, 8, 8))
    for _ in range(100):
        box = np.array([[*r.uniform(0.35, 0.65, 2), *r.uniform(0.2, 0.5, 2)]])
        jj = (np.arange(3) + 0.5) / 3 - 0.5
        px = (box[0, 0] + box[0, 2] * jj) * 8 - 0.5
        py = (box[0, 1] + box[0, 3] * jj) * 8 - 0.5
        if np.abs(np.concatenate([px, py]) - np.round(np.concatenate([px, py]))).min() > 0.05:
            break
    assert grad_error(lambda m, b: _contract(dec.roi_align(m, b, 3, 3)), [fmap, box]) < 1e-4


def test_crop_mirror_matches_flipped_map(rng):
    fmap = rng.normal(size=(1, C, 6, 5))
    box = np.array([[0.3, 0.6, 0.4, 0.5]])
    box_m = box.copy()
    box_m[0, 0] = 1 - box[0, 0]
    a = dec.crop_levels(fmap, [fmap], box, TOY)
    b = dec.crop_levels(fmap[..., ::-1].copy(), [fmap[..., ::-1].copy()], box_m, TOY, mirror=True)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.data, y.data, atol=1e-14)


# ---------------------------------------------------------------- keypoints and tokens

def test_soft_argmax_saturated_peak():
    heat = np.zeros((1, 1, 4, 6))
    heat[0, 0, 2, 1] = 20.0
    pt = dec.soft_argmax(heat)[0].data[0, 0]
    np.testing.assert_allclose(pt, [(1 + 0.5) / 6, (2 + 0.5) / 4], atol=1e-6)


def test_soft_argmax_uniform_is_centre():
    np.testing.assert_allclose(dec.soft_argmax(np.zeros((1, 2, 5, 3)))[0].data, 0.5, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_soft_argmax_grad(seed):
    x = np.random.default_rng(seed).normal(size=(1, 3, 4, 5))
    assert grad_error(lambda h: _contract(dec.soft_argmax(h)[0]), [x]) < 1e-4


def test_component_tokens_shape_and_decomposition(rng):
    P = toy_weights(perturb=0.1)
    F = rng.normal(size=(2, C, 3, 3))
    ref, _ = dec.regress_reference_keypoints(F, P, "hand")
    assert ref.shape == (2, TOY.K_hand, 2)
    assert ((ref.data >= 0) & (ref.data <= 1)).all()
    tok = dec.build_component_tokens(F, ref, P, "hand")
    assert tok.shape == (2, TOY.K_hand, C // 2)

    Pz = {**P, "hand.query": np.zeros_like(P["hand.query"]), "hand.tok_proj.b": np.zeros(C // 2)}
    tok0 = dec.build_component_tokens(np.zeros_like(F), ref, Pz, "hand").data
    np.testing.assert_allclose(tok0, dec.sine_embed(ref, C // 2).data, atol=1e-15)


def test_identical_queries_identical_tokens(rng):
    P = toy_weights(perturb=0.1)
    P["hand.query"][1] = P["hand.query"][0]
    F = rng.normal(size=(1, C, 3, 3))
    ref = np.tile(rng.uniform(0, 1, (1, 1, 2)), (1, TOY.K_hand, 1))
    tok = dec.build_component_tokens(F, ref, P, "hand").data
    np.testing.assert_array_equal(tok[0, 0], tok[0, 1])


# ---------------------------------------------------------------- decoder blocks and heads

def test_decoder_zero_blocks_is_passthrough(rng):
    cfg = DecoderConfig(**{**TOY.__dict__, "n_blocks": 0})
    tok = rng.normal(size=(1, 4, C // 2))
    assert dec.decoder_forward(tok, [], None, {}, "hand", cfg) is tok


@pytest.mark.parametrize("n_blocks", [1, 3])
def test_decoder_output_shape(rng, n_blocks):
    cfg = DecoderConfig(**{**TOY.__dict__, "n_blocks": n_blocks})
    P = toy_weights(cfg, perturb=0.1)
    crops = [rng.normal(size=(2, C, 3, 3)), rng.normal(size=(2, C, 3, 3)), rng.normal(size=(2, C, 6, 6))]
    assert dec.component_from_crops(crops, P, "face", cfg).shape == (2, cfg.K_face, C // 2)


def test_decoder_end_to_end_grad_wrt_crop(rng):
    P = toy_weights(perturb=0.1)
    hi = rng.normal(size=(1, C, 6, 6))
    # keep the upsampled level fixed; vary the base crop that seeds queries and level 1
    F = rng.normal(size=(1, C, 3, 3))
    assert grad_error(lambda f: _contract(dec.component_from_crops([f, f, hi], P, "hand", TOY)), [F],
                      max_coords=30) < 1e-4


def test_hand_head_zero_init_and_dims(rng):
    P = toy_weights()
    tok = rng.normal(size=(2, TOY.K_hand, C // 2))
    th = dec.regress_hand(tok, P)
    assert th.shape == (2, 15, 3)
    assert not th.data.any()


def test_face_head_zero_init_and_dims(rng):
    P = toy_weights()
    jaw, phi = dec.regress_face(rng.normal(size=(2, TOY.K_face, C // 2)), P)
    assert jaw.shape == (2, 3) and phi.shape == (2, 10)
    assert not jaw.data.any() and not phi.data.any()


def test_face_head_grad(rng):
    P = toy_weights(perturb=0.1)
    tok = rng.normal(size=(1, TOY.K_face, C // 2))
    names = [k for k in P if k.startswith("face.head")]

    def fn(*vals):
        jaw, phi = dec.regress_face(tok, {**P, **dict(zip(names, vals))})
        return ops.add(_contract(jaw, 1), _contract(phi, 2))

    assert grad_error(fn, [P[k] for k in names], max_coords=30) < 1e-4


def test_mirror_axis_angle_is_reflection_conjugate(rng):
    aa = rng.normal(size=(20, 3))
    R = rodrigues(aa).data
    Rm = rodrigues(dec.mirror_axis_angle(aa)).data
    np.testing.assert_allclose(Rm, MIRROR @ R @ MIRROR, atol=1e-12)


def test_mirrored_left_crop_round_trip(rng):
    """Left crop of a mirrored scene, decoded through the hand pathway, reproduces the right hand."""
    P = toy_weights(perturb=0.1)
    fmap = rng.normal(size=(1, C, 6, 6))
    up = dec.upsample_multiscale(fmap, P, TOY.scales)
    rbox = np.array([[0.7, 0.4, 0.3, 0.3]])
    lbox = rbox * [-1, 1, 1, 1] + [1, 0, 0, 0]
    flipped = [ops.as_tensor(m).data[..., ::-1].copy() for m in up]
    right = dec.regress_hand(dec.component_from_crops(dec.crop_levels(fmap, up, rbox, TOY), P, "hand", TOY), P)
    lcrops = dec.crop_levels(flipped[0], flipped, lbox, TOY, mirror=True)
    left = dec.mirror_axis_angle(dec.regress_hand(dec.component_from_crops(lcrops, P, "hand", TOY), P))
    np.testing.assert_allclose(dec.mirror_axis_angle(left).data, right.data, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(scales=(1, 3)).validate(64)
    with pytest.raises(ValueError):
        DecoderConfig(scales=()).validate(64)
    with pytest.raises(ValueError):
        DecoderConfig(n_points=0).validate(64)
    assert DecoderConfig().width(768) == 384
