"""SMPL-X-style layer: blendshapes, axis-angle kinematic tree, linear blend skinning.

Everything accepts a leading batch axis and runs on :mod:`catmesh.autodiff`
tensors, so the mesh is differentiable w.r.t. every regressed parameter.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..autodiff import ops
from ..autodiff.tape import Tensor, as_tensor, common_tape
from .template import JOINT_MIRROR, N_BODY, N_EXPR, N_HAND, N_SHAPE, BodyTemplate

SMALL_ANGLE = 1e-8

# name, per-sample shape
PARAM_LAYOUT = (
    ("theta_body", (N_BODY, 3)),
    ("beta", (N_SHAPE,)),
    ("t", (3,)),
    ("theta_lhand", (N_HAND, 3)),
    ("theta_rhand", (N_HAND, 3)),
    ("theta_jaw", (3,)),
    ("phi", (N_EXPR,)),
)
PARAM_SIZES = {name: int(np.prod(shape)) for name, shape in PARAM_LAYOUT}
N_PARAMS = sum(PARAM_SIZES.values())  # 182


@dataclass
class SmplxParams:
    """The full regressed parameter set; fields may carry a leading batch axis."""
    theta_body: object
    beta: object
    t: object
    theta_lhand: object
    theta_rhand: object
    theta_jaw: object
    phi: object

    @classmethod
    def zeros(cls, batch: int | None = None, dtype=np.float64) -> "SmplxParams":
        lead = () if batch is None else (batch,)
        return cls(**{n: np.zeros(lead + s, dtype=dtype) for n, s in PARAM_LAYOUT})

    @classmethod
    def from_vector(cls, vec) -> "SmplxParams":
        """Inverse of :meth:`to_vector`; a tape-tracked vector yields tracked fields."""
        if not isinstance(vec, Tensor):
            vec = np.asarray(vec)
        if vec.shape[-1] != N_PARAMS:
            raise ValueError(f"expected {N_PARAMS} parameters, got {vec.shape[-1]}")
        lead = vec.shape[:-1]
        out, i = {}, 0
        for name, shape in PARAM_LAYOUT:
            n = PARAM_SIZES[name]
            out[name] = vec[..., i:i + n].reshape(lead + shape)
            i += n
        return cls(**out)

    def to_vector(self):
        """Flatten to ``[..., 182]``; tensors stay on their tape."""
        parts = [getattr(self, name) for name, _ in PARAM_LAYOUT]
        if any(isinstance(p, Tensor) for p in parts):
            lead = as_tensor(parts[0]).shape[:-2]
            return ops.concat([ops.reshape(as_tensor(p), lead + (-1,)) for p in parts], axis=-1)
        lead = np.shape(parts[0])[:-2]
        return np.concatenate([np.reshape(p, lead + (-1,)) for p in parts], axis=-1)

    def validate(self) -> None:
        for name, shape in PARAM_LAYOUT:
            v = np.asarray(getattr(self, name).data if isinstance(getattr(self, name), Tensor) else getattr(self, name))
            if v.shape[-len(shape):] != shape:
                raise ValueError(f"{name}: expected trailing shape {shape}, got {v.shape}")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name}: non-finite values")

    def numpy(self) -> "SmplxParams":
        return SmplxParams(**{f.name: np.asarray(getattr(self, f.name).data if isinstance(getattr(self, f.name), Tensor)
                                                  else getattr(self, f.name)) for f in fields(self)})


@dataclass
class MeshOutput:
    vertices: Tensor  # [..., V, 3]
    joints: Tensor    # [..., J, 3]


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    return np.stack([np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)], -2)


def _rodrigues_np(aa: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(aa, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    K = _skew(aa / safe[..., None])
    s = np.sin(theta)[..., None, None]
    c = np.cos(theta)[..., None, None]
    eye = np.broadcast_to(np.eye(3, dtype=aa.dtype), K.shape)
    R = eye + s * K + (1.0 - c) * (K @ K)
    if np.any(small):
        R = np.where(small[..., None, None], eye + _skew(aa), R)
    return R


def rodrigues(aa) -> Tensor:
    """Axis-angle ``[..., 3]`` to rotation matrices ``[..., 3, 3]``.

    Below ``|aa| < 1e-8`` the first-order form ``I + [aa]x`` is used. The
    backward pass uses the closed-form derivative
    ``dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) R / |v|^2``
    (Gallego & Yezzi), which is ``[e_i]x`` in the small-angle branch.
    """
    aa_t = as_tensor(aa)
    v = aa_t.data
    R = _rodrigues_np(v)

    def backward(g):
        theta2 = (v * v).sum(-1)
        small = theta2 < SMALL_ANGLE ** 2
        safe2 = np.where(small, 1.0, theta2)
        eye = np.eye(3, dtype=v.dtype)
        I_minus_R = eye - R
        out = np.empty_like(v)
        for i in range(3):
            e_i = I_minus_R[..., :, i]            # (I - R) e_i
            cross = np.cross(v, e_i)
            dR = (v[..., i, None, None] * _skew(v) + _skew(cross)) @ R / safe2[..., None, None]
            if np.any(small):
                ei = np.zeros(3, dtype=v.dtype)
                ei[i] = 1.0
                dR = np.where(small[..., None, None], _skew(ei), dR)
            out[..., i] = (g * dR).sum(axis=(-2, -1))
        return (out,)

    tape = common_tape((aa_t,))
    if tape is None:
        return Tensor(R)
    return tape.record(R, (aa_t,), backward)


def shape_blend(template: BodyTemplate, beta, phi) -> tuple[Tensor, Tensor]:
    """Shaped rest vertices ``[..., V, 3]`` and the rest joints regressed from them."""
    beta, phi = as_tensor(beta), as_tensor(phi)
    if beta.shape[-1] != N_SHAPE or phi.shape[-1] != N_EXPR:
        raise ValueError(f"beta/phi must have length {N_SHAPE}/{N_EXPR}, got {beta.shape}/{phi.shape}")
    V = template.n_vertices
    lead = beta.shape[:-1]
    dirs = np.concatenate([template.shape_dirs, template.expr_dirs], axis=-1).reshape(V * 3, -1)
    coeffs = ops.concat([beta, phi], axis=-1)
    offs = ops.reshape(ops.matmul(ops.reshape(coeffs, (-1, N_SHAPE + N_EXPR)), dirs.T), lead + (V, 3))
    verts = ops.add(offs, template.vertices)
    joints = ops.matmul(template.joint_regressor, verts)
    return verts, joints


def _depth_levels(parents: np.ndarray) -> list[np.ndarray]:
    depth = np.zeros(len(parents), dtype=np.int64)
    for j in range(1, len(parents)):
        depth[j] = depth[parents[j]] + 1
    return [np.flatnonzero(depth == d) for d in range(depth.max() + 1)]


def forward_kinematics(rest_joints, rotations, parents) -> tuple[Tensor, Tensor]:
    """Chain local rotations down the tree.

    Returns posed joints ``[..., J, 3]`` and rest-relative rigid transforms
    ``[..., J, 4, 4]`` (the transform that maps a rest-pose point attached to
    joint j to its posed position).
    """
    rest_joints, rotations = as_tensor(rest_joints), as_tensor(rotations)
    parents = np.asarray(parents)
    lead = rest_joints.shape[:-2]
    J = len(parents)
    levels = _depth_levels(parents)
    slot = np.empty(J, dtype=np.int64)    # position of joint within its level
    for lev in levels:
        slot[lev] = np.arange(len(lev))

    rel_rest = ops.sub(rest_joints, ops.getitem(rest_joints, (..., np.maximum(parents, 0), slice(None))))
    R_levels, t_levels = [], []
    for d, lev in enumerate(levels):
        R_loc = ops.getitem(rotations, (..., lev, slice(None), slice(None)))
        if d == 0:
            R_levels.append(R_loc)
            t_levels.append(ops.getitem(rest_joints, (..., lev, slice(None))))
            continue
        pidx = slot[parents[lev]]
        R_par = ops.getitem(R_levels[d - 1], (..., pidx, slice(None), slice(None)))
        t_par = ops.getitem(t_levels[d - 1], (..., pidx, slice(None)))
        off = ops.getitem(rel_rest, (..., lev, slice(None)))
        R_levels.append(ops.matmul(R_par, R_loc))
        t_levels.append(ops.add(ops.reshape(ops.matmul(R_par, ops.reshape(off, off.shape + (1,))), off.shape), t_par))
    order = np.concatenate(levels)
    inv = np.argsort(order)
    R_glob = ops.getitem(ops.concat(R_levels, axis=-3), (..., inv, slice(None), slice(None)))
    posed = ops.getitem(ops.concat(t_levels, axis=-2), (..., inv, slice(None)))

    rot_rest = ops.reshape(ops.matmul(R_glob, ops.reshape(rest_joints, lead + (J, 3, 1))), lead + (J, 3))
    t_rel = ops.sub(posed, rot_rest)
    top = ops.concat([R_glob, ops.reshape(t_rel, lead + (J, 3, 1))], axis=-1)
    bottom = np.broadcast_to(np.array([0.0, 0.0, 0.0, 1.0], dtype=top.dtype), lead + (J, 1, 4))
    return posed, ops.concat([top, bottom], axis=-2)


def lbs(shaped_vertices, transforms, skin_weights) -> Tensor:
    """Pose vertices by the skin-weighted blend of rest-relative transforms."""
    verts, A = as_tensor(shaped_vertices), as_tensor(transforms)
    lead = verts.shape[:-2]
    V = verts.shape[-2]
    J = A.shape[-3]
    A12 = ops.reshape(ops.getitem(A, (..., slice(0, 3), slice(None))), lead + (J, 12))
    T = ops.reshape(ops.matmul(skin_weights, A12), lead + (V, 3, 4))
    rot = ops.getitem(T, (..., slice(0, 3)))
    trans = ops.getitem(T, (..., 3))
    posed = ops.matmul(rot, ops.reshape(verts, lead + (V, 3, 1)))
    return ops.add(ops.reshape(posed, lead + (V, 3)), trans)


def full_pose(params: SmplxParams) -> Tensor:
    """Stack per-joint axis-angles in template joint order: body, left hand, right hand, jaw."""
    body = as_tensor(params.theta_body)
    lead = body.shape[:-2]
    jaw = ops.reshape(as_tensor(params.theta_jaw), lead + (1, 3))
    return ops.concat([body, as_tensor(params.theta_lhand), as_tensor(params.theta_rhand), jaw], axis=-2)


def smplx_forward(template: BodyTemplate, params: SmplxParams) -> MeshOutput:
    verts, joints = shape_blend(template, params.beta, params.phi)
    R = rodrigues(full_pose(params))
    posed_joints, A = forward_kinematics(joints, R, template.parents)
    posed_verts = lbs(verts, A, template.skin_weights)
    t = as_tensor(params.t)
    t = ops.reshape(t, t.shape[:-1] + (1, 3))
    return MeshOutput(vertices=ops.add(posed_verts, t), joints=ops.add(posed_joints, t))


def flip_params(params: SmplxParams) -> SmplxParams:
    """Parameters of the mirror image (x -> -x) of the posed body.

    Swaps left/right joints and hands and maps each axis-angle
    ``(a_x, a_y, a_z)`` to ``(a_x, -a_y, -a_z)``; only valid for numpy params
    on a mirror-symmetric template.
    """
    p = params.numpy()
    sign = np.array([1.0, -1.0, -1.0])
    body = p.theta_body[..., JOINT_MIRROR[:N_BODY], :] * sign
    return SmplxParams(
        theta_body=body,
        beta=p.beta.copy(),
        t=p.t * np.array([-1.0, 1.0, 1.0]),
        theta_lhand=p.theta_rhand * sign,
        theta_rhand=p.theta_lhand * sign,
        theta_jaw=p.theta_jaw * sign,
        phi=p.phi.copy(),
    )
