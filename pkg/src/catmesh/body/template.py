"""Procedural stand-in for the SMPL-X assets.

The toy body is a mirror-symmetric humanoid built from rings of four
vertices strung along every bone of a 53-joint tree (22 body, 15 per hand,
1 jaw). Frame convention: x towards the subject's left, y down, z away from
the camera, metres. The pelvis sits at the origin.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_BODY = 22
N_HAND = 15
N_JOINTS = N_BODY + 2 * N_HAND + 1
N_SHAPE = 10
N_EXPR = 10
LHAND = slice(N_BODY, N_BODY + N_HAND)
RHAND = slice(N_BODY + N_HAND, N_BODY + 2 * N_HAND)
JAW = N_JOINTS - 1
HEAD = 15
NECK = 12
L_WRIST, R_WRIST = 20, 21

BODY_NAMES = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar",
    "right_collar", "head", "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
]
FINGERS = ["index", "middle", "pinky", "ring", "thumb"]
JOINT_NAMES = (
    BODY_NAMES
    + [f"left_{f}{i}" for f in FINGERS for i in (1, 2, 3)]
    + [f"right_{f}{i}" for f in FINGERS for i in (1, 2, 3)]
    + ["jaw"]
)

_BODY_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19]


def _hand_parents(wrist: int, start: int) -> list[int]:
    out = []
    for f in range(5):
        base = start + 3 * f
        out += [wrist, base, base + 1]
    return out


PARENTS = np.array(
    _BODY_PARENTS + _hand_parents(L_WRIST, N_BODY) + _hand_parents(R_WRIST, N_BODY + N_HAND) + [HEAD],
    dtype=np.int64,
)


def _mirror_joint_map() -> np.ndarray:
    idx = {n: i for i, n in enumerate(JOINT_NAMES)}
    out = np.arange(N_JOINTS)
    for i, n in enumerate(JOINT_NAMES):
        if n.startswith("left_"):
            out[i] = idx["right_" + n[5:]]
        elif n.startswith("right_"):
            out[i] = idx["left_" + n[6:]]
    return out


JOINT_MIRROR = _mirror_joint_map()
MIRROR = np.diag([-1.0, 1.0, 1.0])

# which component owns the vertices strung along each joint's bone
COMPONENT_JOINTS = {
    "lhand": [L_WRIST] + list(range(LHAND.start, LHAND.stop)),
    "rhand": [R_WRIST] + list(range(RHAND.start, RHAND.stop)),
    "face": [HEAD, JAW],
}
COMPONENT_JOINTS["body"] = [
    j for j in range(N_BODY) if j not in COMPONENT_JOINTS["lhand"] + COMPONENT_JOINTS["rhand"] + COMPONENT_JOINTS["face"]
]
COMPONENTS = ("body", "lhand", "rhand", "face")

MIN_VERTS_PER_JOINT = 4


@dataclass(frozen=True)
class TemplateConfig:
    """Vertex budgets per component; each joint gets ``budget // n_joints`` rounded down to rings of 4."""
    body: int = 152
    lhand: int = 128
    rhand: int = 128
    face: int = 32
    jitter: float = 0.05

    @classmethod
    def minimal(cls) -> "TemplateConfig":
        n = {c: len(j) * MIN_VERTS_PER_JOINT for c, j in COMPONENT_JOINTS.items()}
        return cls(**n)


@dataclass(eq=False)
class BodyTemplate:
    vertices: np.ndarray          # V x 3
    faces: np.ndarray             # F x 3
    shape_dirs: np.ndarray        # V x 3 x 10
    expr_dirs: np.ndarray         # V x 3 x 10
    joint_regressor: np.ndarray   # J x V
    skin_weights: np.ndarray      # V x J
    parents: np.ndarray           # J, parents[0] == -1
    component_masks: dict         # name -> vertex index array
    joints: np.ndarray = field(default=None)  # J x 3 rest joints
    vertex_mirror: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.joints is None:
            self.joints = self.joint_regressor @ self.vertices

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    def validate(self, tol: float = 1e-9) -> None:
        V, J = self.n_vertices, self.n_joints
        checks = [
            (self.vertices.shape == (V, 3), "vertices shape"),
            (self.shape_dirs.shape == (V, 3, N_SHAPE), "shape_dirs shape"),
            (self.expr_dirs.shape == (V, 3, N_EXPR), "expr_dirs shape"),
            (self.joint_regressor.shape == (J, V), "joint_regressor shape"),
            (self.skin_weights.shape == (V, J), "skin_weights shape"),
            (self.parents[0] < 0, "parents[0] must be the root sentinel"),
            (all(0 <= self.parents[j] < j for j in range(1, J)), "parents must be topologically ordered"),
            (np.all(self.skin_weights >= 0), "negative skin weight"),
            (np.allclose(self.skin_weights.sum(1), 1.0, atol=tol, rtol=0), "skin weight rows must sum to 1"),
            (np.allclose(self.joint_regressor.sum(1), 1.0, atol=tol, rtol=0), "regressor rows must sum to 1"),
            (self.faces.size == 0 or (self.faces.min() >= 0 and self.faces.max() < V), "face index out of range"),
        ]
        for ok, what in checks:
            if not ok:
                raise ValueError(f"invalid body template: {what}")


def _rest_skeleton() -> tuple[np.ndarray, np.ndarray]:
    """Rest joints and bone end points for the toy humanoid (left side built, right mirrored)."""
    P = np.zeros((N_JOINTS, 3))
    end = np.zeros((N_JOINTS, 3))
    arm = np.array([np.cos(np.deg2rad(40.0)), np.sin(np.deg2rad(40.0)), 0.0])
    side = np.array([-arm[1], arm[0], 0.0])  # in-plane normal of the arm

    left = {
        0: (0.0, 0.0, 0.0), 1: (0.09, 0.07, 0.0), 3: (0.0, -0.10, 0.0), 4: (0.10, 0.46, 0.0),
        6: (0.0, -0.22, 0.0), 7: (0.10, 0.86, 0.0), 9: (0.0, -0.34, 0.0), 10: (0.10, 0.92, -0.10),
        12: (0.0, -0.50, 0.0), 13: (0.07, -0.45, 0.0), 15: (0.0, -0.58, 0.0), 16: (0.18, -0.46, 0.0),
    }
    for j, p in left.items():
        P[j] = p
    P[18] = P[16] + 0.27 * arm
    P[20] = P[18] + 0.25 * arm
    # left hand: fingers run along the arm direction
    finger_base = {"index": (0.10, -0.03), "middle": (0.105, -0.01), "ring": (0.10, 0.01), "pinky": (0.09, 0.03)}
    seg = {"index": 0.040, "middle": 0.045, "ring": 0.040, "pinky": 0.032, "thumb": 0.035}
    for f, name in enumerate(FINGERS):
        base = N_BODY + 3 * f
        if name == "thumb":
            d = 0.6 * arm - 0.8 * side
            root = P[20] + 0.035 * arm - 0.045 * side + np.array([0, 0, -0.02])
        else:
            a, b = finger_base[name]
            d = arm
            root = P[20] + a * arm + b * side
        for i in range(3):
            P[base + i] = root + i * seg[name] * d
            end[base + i] = root + (i + 1) * seg[name] * d
    P[JAW] = (0.0, -0.64, -0.04)
    end[JAW] = (0.0, -0.60, -0.11)

    for j in range(N_BODY):
        m = JOINT_MIRROR[j]
        if m != j and JOINT_NAMES[j].startswith("right_"):
            P[j] = MIRROR @ P[m]
    for k in range(N_HAND):
        P[RHAND.start + k] = MIRROR @ P[LHAND.start + k]
        end[RHAND.start + k] = MIRROR @ end[LHAND.start + k]

    children = {j: [c for c in range(N_JOINTS) if PARENTS[c] == j] for j in range(N_JOINTS)}
    override = {0: P[3], 9: P[12], 15: np.array([0.0, -0.84, 0.0]), 20: P[N_BODY + 3], 21: P[N_BODY + N_HAND + 3],
                10: P[10] + np.array([0.0, 0.0, -0.08]), 11: None}
    for j in range(N_BODY):
        if j in override:
            end[j] = override[j] if override[j] is not None else MIRROR @ end[JOINT_MIRROR[j]]
        elif len(children[j]) == 1:
            end[j] = P[children[j][0]]
        else:
            end[j] = P[children[j][0]]
    end[11] = MIRROR @ end[10]
    return P, end


_RADIUS = {
    0: 0.11, 1: 0.07, 2: 0.07, 3: 0.11, 4: 0.05, 5: 0.05, 6: 0.12, 7: 0.04, 8: 0.04, 9: 0.12,
    10: 0.035, 11: 0.035, 12: 0.05, 13: 0.05, 14: 0.05, 15: 0.09, 16: 0.045, 17: 0.045,
    18: 0.04, 19: 0.04, 20: 0.035, 21: 0.035, JAW: 0.04,
}


def _ring_basis(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = d / np.linalg.norm(d)
    if abs(d[0]) < 1e-9:
        u = np.array([1.0, 0.0, 0.0])  # centre-line bones: ring symmetric under x -> -x
    else:
        helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(helper, d)
        u /= np.linalg.norm(u)
    v = np.cross(d, u)
    return u, v / np.linalg.norm(v)


def make_toy_template(cfg: TemplateConfig | None = None, seed: int = 0) -> BodyTemplate:
    cfg = cfg or TemplateConfig()
    rng = np.random.default_rng(seed)
    joints, ends = _rest_skeleton()
    J = N_JOINTS

    per_joint = {}
    for comp, js in COMPONENT_JOINTS.items():
        n = (getattr(cfg, comp) // len(js)) // 4 * 4
        if n < MIN_VERTS_PER_JOINT:
            raise ValueError(
                f"vertex budget for {comp!r} ({getattr(cfg, comp)}) is below the minimum "
                f"{MIN_VERTS_PER_JOINT * len(js)} (each joint needs >= {MIN_VERTS_PER_JOINT} skinned vertices)"
            )
        for j in js:
            per_joint[j] = n

    # jitter is drawn for the left/centre joints and mirrored to the right
    jit = {}
    for j in range(J):
        n_rings = per_joint[j] // 4
        jit[j] = 1.0 + cfg.jitter * rng.uniform(-1, 1, size=(n_rings, 2))
    for j in range(J):
        if JOINT_NAMES[j].startswith("right_"):
            jit[j] = jit[JOINT_MIRROR[j]]

    verts, owner, ring_of, first_ring, last_ring = [], [], [], {}, {}
    basis = {}
    for j in range(J):
        if JOINT_NAMES[j].startswith("right_"):
            lu, lv = basis[JOINT_MIRROR[j]]
            basis[j] = (MIRROR @ lu, MIRROR @ lv)
        else:
            basis[j] = _ring_basis(ends[j] - joints[j])
    # right joints reference left bases, so visit left/centre first
    for j in range(J):
        u, v = basis[j]
        r = _RADIUS.get(j, 0.012 if j >= N_BODY else 0.05)
        n_rings = per_joint[j] // 4
        rings = []
        for k in range(n_rings):
            s = 0.0 if n_rings == 1 else 0.85 * k / (n_rings - 1)
            c = joints[j] + s * (ends[j] - joints[j])
            ru, rv = r * jit[j][k, 0], r * jit[j][k, 1]
            idx = len(verts)
            verts += [c + ru * u, c + rv * v, c - ru * u, c - rv * v]
            owner += [j] * 4
            ring_of += [(j, k)] * 4
            rings.append(idx)
        first_ring[j] = rings[0]
        last_ring[j] = rings[-1]
    V = len(verts)
    vertices = np.array(verts)
    owner = np.array(owner)

    skin = np.zeros((V, J))
    for i in range(V):
        j, k = ring_of[i]
        if k == 0 and PARENTS[j] >= 0:
            skin[i, j] = 0.5
            skin[i, PARENTS[j]] = 0.5
        else:
            skin[i, j] = 1.0

    reg = np.zeros((J, V))
    for j in range(J):
        reg[j, first_ring[j]:first_ring[j] + 4] = 0.25

    faces = []

    def strip(a: int, b: int):
        for q in range(4):
            a0, a1 = a + q, a + (q + 1) % 4
            b0, b1 = b + q, b + (q + 1) % 4
            faces.append((a0, a1, b1))
            faces.append((a0, b1, b0))

    for j in range(J):
        n_rings = per_joint[j] // 4
        for k in range(n_rings - 1):
            strip(first_ring[j] + 4 * k, first_ring[j] + 4 * (k + 1))
        if PARENTS[j] >= 0:
            strip(last_ring[PARENTS[j]], first_ring[j])
    faces = np.array(faces, dtype=np.int64)

    # vertex mirror permutation
    mirror = np.empty(V, dtype=np.int64)
    for j in range(J):
        m = JOINT_MIRROR[j]
        for q in range(per_joint[j]):
            src = first_ring[j] + q
            if m != j:
                mirror[src] = first_ring[m] + q
            else:
                ring_start = src - q % 4
                mirror[src] = ring_start + [2, 1, 0, 3][q % 4]

    shape_dirs = np.zeros((V, 3, N_SHAPE))
    centre = np.repeat(vertices.reshape(-1, 4, 3).mean(axis=1), 4, axis=0)
    shape_dirs[:, :, 0] = 0.08 * (vertices - joints[0])
    shape_dirs[:, :, 1] = 0.3 * (vertices - centre)
    # remaining shape components perturb bone offsets; the shift propagates to descendants
    bone_shift = rng.normal(scale=0.015, size=(J, 3, N_SHAPE - 2))
    ancestors = []
    for j in range(J):
        chain, a = [], j
        while a >= 0:
            chain.append(a)
            a = PARENTS[a]
        ancestors.append(chain)
    for i in range(V):
        shape_dirs[i, :, 2:] = bone_shift[ancestors[owner[i]]].sum(axis=0)

    expr_dirs = np.zeros((V, 3, N_EXPR))
    face_idx = np.flatnonzero(np.isin(owner, COMPONENT_JOINTS["face"]))
    expr_dirs[face_idx] = rng.normal(scale=0.01, size=(len(face_idx), 3, N_EXPR))

    shape_dirs = 0.5 * (shape_dirs + np.einsum("ab,vbk->vak", MIRROR, shape_dirs[mirror]))
    expr_dirs = 0.5 * (expr_dirs + np.einsum("ab,vbk->vak", MIRROR, expr_dirs[mirror]))

    masks = {c: np.flatnonzero(np.isin(owner, COMPONENT_JOINTS[c])) for c in COMPONENTS}
    tpl = BodyTemplate(
        vertices=vertices, faces=faces, shape_dirs=shape_dirs, expr_dirs=expr_dirs,
        joint_regressor=reg, skin_weights=skin, parents=PARENTS.copy(), component_masks=masks,
        joints=joints.copy(), vertex_mirror=mirror,
    )
    tpl.validate()
    return tpl
