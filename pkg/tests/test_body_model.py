import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from catmesh.autodiff import ops
from catmesh.autodiff.fd import grad_error
from catmesh.body import (N_JOINTS, N_PARAMS, PARENTS, SmplxParams, TemplateConfig, flip_params, forward_kinematics,
                          lbs, load_template, make_toy_template, rodrigues, save_template, shape_blend, smplx_forward)
from catmesh.body.template import MIRROR


def random_params(rng, scale=0.5, batch=None):
    lead = () if batch is None else (batch,)
    vec = rng.uniform(-scale, scale, size=lead + (N_PARAMS,))
    return SmplxParams.from_vector(vec)


def bone_lengths(joints):
    return np.linalg.norm(joints[..., 1:, :] - joints[..., PARENTS[1:], :], axis=-1)


# ---------------------------------------------------------------- params

def test_param_count():
    assert N_PARAMS == 22 * 3 + 10 + 3 + 15 * 3 + 15 * 3 + 3 + 10 == 182


def test_param_vector_round_trip(rng):
    vec = rng.normal(size=(4, N_PARAMS))
    np.testing.assert_array_equal(SmplxParams.from_vector(vec).to_vector(), vec)


def test_param_vector_length_checked():
    with pytest.raises(ValueError):
        SmplxParams.from_vector(np.zeros(181))


def test_params_reject_non_finite():
    p = SmplxParams.zeros()
    p.beta[3] = np.nan
    with pytest.raises(ValueError):
        p.validate()


# ---------------------------------------------------------------- rodrigues

def test_rodrigues_identity():
    np.testing.assert_array_equal(rodrigues(np.zeros(3)).data, np.eye(3))


def test_rodrigues_half_turn_x():
    np.testing.assert_allclose(rodrigues(np.array([math.pi, 0, 0])).data, np.diag([1.0, -1, -1]), atol=1e-15)


def test_rodrigues_quarter_turn_z():
    want = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_allclose(rodrigues(np.array([0, 0, math.pi / 2])).data, want, atol=1e-15)


def test_rodrigues_small_angle_branch():
    aa = np.array([3e-9, -2e-9, 1e-9])
    skew = np.array([[0, -aa[2], aa[1]], [aa[2], 0, -aa[0]], [-aa[1], aa[0], 0]])
    np.testing.assert_array_equal(rodrigues(aa).data, np.eye(3) + skew)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-10, 10, allow_nan=False)))
def test_rodrigues_is_rotation(aa):
    R = rodrigues(aa).data
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_rodrigues_grad(seed):
    aa = np.random.default_rng(seed).normal(size=(4, 3))
    w = np.random.default_rng(99).normal(size=(4, 3, 3))
    assert grad_error(lambda a: ops.sum(ops.mul(rodrigues(a), w)), [aa]) < 1e-4


# ---------------------------------------------------------------- template

def test_template_deterministic():
    a, b = make_toy_template(seed=3), make_toy_template(seed=3)
    for name in ("vertices", "faces", "shape_dirs", "expr_dirs", "joint_regressor", "skin_weights", "parents"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_template_invariants(template):
    template.validate()
    assert template.n_joints == N_JOINTS == 53
    assert template.parents[0] < 0
    assert all(0 <= template.parents[j] < j for j in range(1, N_JOINTS))
    assert np.abs(template.skin_weights.sum(1) - 1).max() <= 1e-9
    assert np.abs(template.joint_regressor.sum(1) - 1).max() <= 1e-9
    assert (template.skin_weights >= 0).all()


def test_template_regressor_self_consistent(template):
    np.testing.assert_allclose(template.joint_regressor @ template.vertices, template.joints, atol=1e-9, rtol=0)


def test_template_every_joint_skins_four_vertices(small_template):
    assert ((small_template.skin_weights > 0).sum(0) >= 4).all()


def test_template_budget_below_minimum():
    with pytest.raises(ValueError, match="minimum"):
        make_toy_template(TemplateConfig(body=20))


def test_template_mirror_symmetric(template):
    V = template.vertices
    np.testing.assert_allclose(V[template.vertex_mirror] @ MIRROR, V, atol=1e-12)


def test_zero_pose_is_upright_humanoid(template):
    extent = template.vertices.max(0) - template.vertices.min(0)
    assert extent[1] > 1.5 * extent[2]          # taller than deep
    assert 1.2 < extent[1] < 2.2                # metres
    assert 0.3 * extent[1] < extent[0] < 1.2 * extent[1]


def test_template_file_round_trip(template, tmp_path):
    path = tmp_path / "t.bin"
    save_template(template, path)
    assert path.read_bytes()[:8] == b"CATBODY1"
    back = load_template(path)
    for name in ("vertices", "faces", "shape_dirs", "expr_dirs", "joint_regressor", "skin_weights", "parents"):
        assert np.array_equal(getattr(template, name), getattr(back, name)), name
    for c, idx in template.component_masks.items():
        assert np.array_equal(idx, back.component_masks[c])


def test_template_file_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTABODY" + bytes(64))
    with pytest.raises(ValueError):
        load_template(path)


# ---------------------------------------------------------------- shape_blend

def test_shape_blend_zero(template):
    verts, joints = shape_blend(template, np.zeros(10), np.zeros(10))
    np.testing.assert_array_equal(verts.data, template.vertices)


def test_expression_only_moves_face(template, rng):
    base, _ = shape_blend(template, np.zeros(10), np.zeros(10))
    moved, _ = shape_blend(template, np.zeros(10), rng.normal(size=10))
    changed = np.flatnonzero(np.abs(moved.data - base.data).max(1) > 0)
    assert len(changed) > 0
    assert set(changed) <= set(template.component_masks["face"].tolist())


def test_shape_blend_linear(template, rng):
    b, p = rng.normal(size=10), rng.normal(size=10)
    v0 = shape_blend(template, np.zeros(10), np.zeros(10))[0].data
    v1 = shape_blend(template, b, p)[0].data
    v2 = shape_blend(template, 2 * b, 2 * p)[0].data
    np.testing.assert_allclose(v2 - v0, 2 * (v1 - v0), atol=1e-12, rtol=0)


def test_shape_blend_length_mismatch(template):
    with pytest.raises(ValueError):
        shape_blend(template, np.zeros(9), np.zeros(10))


# ---------------------------------------------------------------- kinematics

def test_fk_identity(template):
    R = np.broadcast_to(np.eye(3), (N_JOINTS, 3, 3))
    posed, A = forward_kinematics(template.joints, R, template.parents)
    np.testing.assert_allclose(posed.data, template.joints, atol=1e-15)
    np.testing.assert_allclose(A.data, np.broadcast_to(np.eye(4), (N_JOINTS, 4, 4)), atol=1e-15)


def test_fk_bone_lengths(template, rng):
    R = rodrigues(rng.normal(size=(200, N_JOINTS, 3))).data
    posed, _ = forward_kinematics(np.broadcast_to(template.joints, (200, N_JOINTS, 3)), R, template.parents)
    rest = bone_lengths(template.joints)
    assert (np.abs(bone_lengths(posed.data) - rest) / rest).max() < 1e-9


def test_fk_root_rotation_rigid(template, rng):
    R0 = rodrigues(rng.normal(size=3)).data
    R = np.broadcast_to(np.eye(3), (N_JOINTS, 3, 3)).copy()
    R[0] = R0
    posed, _ = forward_kinematics(template.joints, R, template.parents)
    root = template.joints[0]
    np.testing.assert_allclose(posed.data, (template.joints - root) @ R0.T + root, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_fk_grad_wrt_axis_angle(template, seed):
    aa = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(N_JOINTS, 3))
    w = np.random.default_rng(9).normal(size=(N_JOINTS, 3))

    def fn(a):
        posed, _ = forward_kinematics(template.joints, rodrigues(a), template.parents)
        return ops.sum(ops.mul(posed, w))

    assert grad_error(fn, [aa], max_coords=40) < 1e-4


def test_lbs_identity(template):
    A = np.broadcast_to(np.eye(4), (N_JOINTS, 4, 4))
    np.testing.assert_allclose(lbs(template.vertices, A, template.skin_weights).data, template.vertices, atol=1e-15)


def test_lbs_single_joint_weight_is_rigid(template, rng):
    A = np.broadcast_to(np.eye(4), (N_JOINTS, 4, 4)).copy()
    j = 7
    A[j, :3, :3] = rodrigues(rng.normal(size=3)).data
    A[j, :3, 3] = rng.normal(size=3)
    owned = np.flatnonzero(template.skin_weights[:, j] == 1.0)
    assert len(owned)
    out = lbs(template.vertices, A, template.skin_weights).data
    want = template.vertices[owned] @ A[j, :3, :3].T + A[j, :3, 3]
    np.testing.assert_allclose(out[owned], want, atol=1e-14)


def test_lbs_all_root_weight(template, rng):
    W = np.zeros_like(template.skin_weights)
    W[:, 0] = 1.0
    R = np.broadcast_to(np.eye(3), (N_JOINTS, 3, 3)).copy()
    R[0] = rodrigues(rng.normal(size=3)).data
    _, A = forward_kinematics(template.joints, R, template.parents)
    root = template.joints[0]
    out = lbs(template.vertices, A, W).data
    np.testing.assert_allclose(out, (template.vertices - root) @ R[0].T + root, atol=1e-12, rtol=0)


# ---------------------------------------------------------------- full model

def test_smplx_forward_translation_only(template):
    p = SmplxParams.zeros()
    p.t[:] = (1.0, 2.0, 3.0)
    mesh = smplx_forward(template, p)
    np.testing.assert_allclose(mesh.vertices.data, template.vertices + [1, 2, 3], atol=1e-14)
    np.testing.assert_allclose(mesh.joints.data, template.joints + [1, 2, 3], atol=1e-14)


def test_smplx_forward_dims(template, rng):
    mesh = smplx_forward(template, random_params(rng))
    assert mesh.vertices.shape == (template.n_vertices, 3)
    assert mesh.joints.shape == (53, 3)
    assert np.isfinite(mesh.vertices.data).all()


def test_smplx_forward_batched_matches_single(template, rng):
    p = random_params(rng, batch=3)
    batched = smplx_forward(template, p).vertices.data
    for i in range(3):
        single = smplx_forward(template, SmplxParams.from_vector(p.to_vector()[i])).vertices.data
        np.testing.assert_allclose(batched[i], single, atol=1e-13)


def test_smplx_grad_of_mean_vertex(small_template):
    vec = np.random.default_rng(4).uniform(-0.4, 0.4, size=N_PARAMS)
    w = np.array([0.3, -1.1, 0.7])

    def fn(v):
        mesh = smplx_forward(small_template, SmplxParams.from_vector(v))
        return ops.sum(ops.mul(ops.mean(mesh.vertices, axis=0), w))

    assert grad_error(fn, [vec]) < 1e-4


def test_bone_lengths_invariant_random_poses(template, rng):
    p = random_params(rng, scale=math.pi, batch=100)
    p.beta[:] = 0.3
    p.phi[:] = 0.0
    shaped = shape_blend(template, p.beta[0], p.phi[0])[1].data
    posed = smplx_forward(template, p).joints.data
    rest = bone_lengths(shaped)
    assert (np.abs(bone_lengths(posed) - rest) / rest).max() < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_translation_equivariance(template, seed, delta):
    p = random_params(np.random.default_rng(seed))
    q = SmplxParams.from_vector(p.to_vector())
    q.t = q.t + delta
    a, b = smplx_forward(template, p), smplx_forward(template, q)
    # adding delta to t and to the output round the same sums in a different order
    np.testing.assert_allclose(b.vertices.data, a.vertices.data + delta, atol=1e-12, rtol=0)
    np.testing.assert_allclose(b.joints.data, a.joints.data + delta, atol=1e-12, rtol=0)


def test_translation_equivariance_exact_for_representable_shift(template, rng):
    p = random_params(rng)
    p.t = np.zeros(3)
    q = SmplxParams.from_vector(p.to_vector())
    q.t = np.array([0.0, 0.0, 0.0]) + np.array([2.0 ** -3, 0.0, 0.0])
    a, b = smplx_forward(template, p), smplx_forward(template, q)
    # zero base translation: both paths add the same float to the same posed value
    assert np.array_equal(b.vertices.data, a.vertices.data + q.t)


def test_smplx_forward_deterministic(template, rng):
    p = random_params(rng)
    assert np.array_equal(smplx_forward(template, p).vertices.data, smplx_forward(template, p).vertices.data)


def test_flip_params_mirrors_mesh(template, rng):
    p = random_params(rng, scale=0.6)
    a = smplx_forward(template, p).vertices.data
    b = smplx_forward(template, flip_params(p)).vertices.data
    np.testing.assert_allclose(b[template.vertex_mirror], a @ MIRROR, atol=1e-12)
