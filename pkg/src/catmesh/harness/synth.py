"""Deterministic synthetic scenes: sampled parameters, a splat renderer, and derived labels.

Rendering (all in float64, pixel centre of column j / row i at ``(j + 0.5, i + 0.5)``):

* background ``-0.8``;
* every mesh vertex adds a faint isotropic Gaussian (sigma 0.5 px) tinted by its component;
* every bone is an anti-aliased segment whose Gaussian cross-section scales with the
  projected bone radius, composited far-to-near with a per-component tint
  (left side warm, right side cool, fingers shaded by finger);
* every joint is a Gaussian splat (sigma 0.6 px) with its own colour.

Images are in ``[-1, 1]``.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ..body.smplx import SmplxParams, _rodrigues_np, flip_params, shape_blend, smplx_forward
from ..body.template import COMPONENT_JOINTS, JOINT_NAMES, N_BODY, N_EXPR, N_HAND, N_JOINTS, N_SHAPE, BodyTemplate
from ..losses import CameraModel, GroundTruth, project_points
from .config import DataConfig

MAX_ATTEMPTS = 20
BOX_MARGIN = 0.15     # fractional growth of each side of the tight box
BOX_MIN_PX = 2.0      # minimum box side in pixels
BACKGROUND = -0.8
BOX_COMPONENTS = ("lhand", "rhand", "face")


class OutOfFrameError(RuntimeError):
    pass


@dataclass
class SynthSample:
    image: np.ndarray       # H, W, 3
    gt: GroundTruth          # unbatched
    sample_id: int
    seed: int


@dataclass
class Dataset:
    images: np.ndarray      # N, H, W, 3
    gt: GroundTruth          # batched
    ids: np.ndarray
    seed: int

    def __len__(self):
        return len(self.ids)

    def batch(self, idx) -> tuple[np.ndarray, GroundTruth]:
        return self.images[idx], self.gt.index(idx)


# ---------------------------------------------------------------- sampling

def sample_params(rng: np.random.Generator) -> SmplxParams:
    """Body joints U[-0.4, 0.4] rad per axis, hands U[-0.8, 0.8], jaw U[-0.3, 0.3], beta/phi U[-1, 1]."""
    u = rng.uniform
    return SmplxParams(
        theta_body=u(-0.4, 0.4, (N_BODY, 3)),
        beta=u(-1.0, 1.0, N_SHAPE),
        t=np.array([u(-0.1, 0.1), u(-0.1, 0.1), u(-2.0, 2.0)]),
        theta_lhand=u(-0.8, 0.8, (N_HAND, 3)),
        theta_rhand=u(-0.8, 0.8, (N_HAND, 3)),
        theta_jaw=u(-0.3, 0.3, 3),
        phi=u(-1.0, 1.0, N_EXPR),
    )


def in_frame(points_px: np.ndarray, H: int, W: int) -> np.ndarray:
    return (points_px[..., 0] >= 0) & (points_px[..., 0] <= W) & (points_px[..., 1] >= 0) & (points_px[..., 1] <= H)


# ---------------------------------------------------------------- rendering

def _joint_colours() -> np.ndarray:
    cols = np.empty((N_JOINTS, 3))
    for j, name in enumerate(JOINT_NAMES):
        cols[j] = colorsys.hsv_to_rgb((j * 0.618034) % 1.0, 0.9, 1.0)
    return cols


def _bone_colours() -> np.ndarray:
    cols = np.empty((N_JOINTS, 3))
    for j, name in enumerate(JOINT_NAMES):
        if j in COMPONENT_JOINTS["lhand"][1:] or j in COMPONENT_JOINTS["rhand"][1:]:
            f = ((j - N_BODY) % N_HAND) // 3
            cols[j] = colorsys.hsv_to_rgb(0.1 + 0.18 * f, 0.8, 0.95)
        elif j in COMPONENT_JOINTS["face"]:
            cols[j] = (0.3, 0.95, 0.4)
        elif name.startswith("left"):
            cols[j] = (0.95, 0.45, 0.3)
        elif name.startswith("right"):
            cols[j] = (0.3, 0.5, 0.95)
        else:
            cols[j] = (0.85, 0.85, 0.85)
    return cols


JOINT_COLOURS = _joint_colours()
BONE_COLOURS = _bone_colours()
COMPONENT_TINT = {"body": (0.6, 0.6, 0.6), "lhand": (0.9, 0.7, 0.2), "rhand": (0.2, 0.7, 0.9), "face": (0.2, 0.9, 0.4)}


def _seg_dist2(px, a, b):
    """Squared distance from pixel centres ``[H*W, 2]`` to segments ``a->b`` ``[S, 2]`` -> ``[S, H*W]``."""
    ab = b - a
    L2 = np.maximum((ab ** 2).sum(-1, keepdims=True), 1e-12)
    t = np.clip(((px[None] - a[:, None]) * ab[:, None]).sum(-1) / L2, 0.0, 1.0)
    closest = a[:, None] + t[..., None] * ab[:, None]
    return ((px[None] - closest) ** 2).sum(-1)


def _gauss_1d(centres, n: int, sigma: float) -> np.ndarray:
    """``[P, n]`` Gaussian profile of each centre over pixel centres ``0.5 .. n - 0.5``."""
    return np.exp(-((np.arange(n) + 0.5)[None] - np.asarray(centres)[:, None]) ** 2 / (2 * sigma ** 2))


def render(template: BodyTemplate, verts_cam: np.ndarray, joints_cam: np.ndarray, cam: CameraModel,
           H: int, W: int) -> np.ndarray:
    """Render one scene given camera-frame vertices and joints."""
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    px = np.stack([jj.ravel(), ii.ravel()], axis=-1)
    vp = np.asarray(project_points(verts_cam, cam).data)
    jp = np.asarray(project_points(joints_cam, cam).data)
    ppm = cam.focal[1] / joints_cam[:, 2]  # pixels per metre at each joint

    img = np.full((H, W, 3), BACKGROUND)
    for comp, idx in template.component_masks.items():
        # isotropic Gaussians are separable: sum_v gy_v(i) gx_v(j)
        dens = _gauss_1d(vp[idx, 1], H, 0.5).T @ _gauss_1d(vp[idx, 0], W, 0.5)
        img += 0.25 * dens[..., None] * np.asarray(COMPONENT_TINT[comp])
    img = img.reshape(H * W, 3)

    child = np.arange(1, N_JOINTS)
    par = template.parents[1:]
    radius = np.where(child >= N_BODY, 0.012, 0.06)
    sig = np.maximum(0.5 * radius * 0.5 * (ppm[child] + ppm[par]), 0.45)
    alpha = np.exp(-_seg_dist2(px, jp[par], jp[child]) / (2 * sig[:, None] ** 2))
    depth = 0.5 * (joints_cam[child, 2] + joints_cam[par, 2])
    for s in np.argsort(-depth, kind="stable"):
        a = alpha[s][:, None]
        img = img * (1 - a) + BONE_COLOURS[child[s]] * a

    gy, gx = _gauss_1d(jp[:, 1], H, 0.6), _gauss_1d(jp[:, 0], W, 0.6)
    for j in np.argsort(-joints_cam[:, 2], kind="stable"):
        a = np.outer(gy[j], gx[j]).reshape(-1, 1)
        img = img * (1 - a) + JOINT_COLOURS[j] * a
    return np.clip(img, -1.0, 1.0).reshape(H, W, 3)


# ---------------------------------------------------------------- labels

def component_boxes(template: BodyTemplate, verts_px, joints_px, H: int, W: int) -> np.ndarray:
    """``[3, 4]`` normalised ``(cx, cy, w, h)`` for lhand, rhand, face.

    Tight box over the component's in-frame vertices and joints, each side grown by
    ``BOX_MARGIN`` of the box size (at least ``BOX_MIN_PX``), then clipped to the image.
    """
    out = np.zeros((3, 4))
    for k, comp in enumerate(BOX_COMPONENTS):
        pts = np.concatenate([verts_px[template.component_masks[comp]], joints_px[COMPONENT_JOINTS[comp]]])
        pts = pts[in_frame(pts, H, W)]
        if len(pts) == 0:
            continue
        lo, hi = pts.min(0), pts.max(0)
        size = np.maximum((hi - lo) * (1 + 2 * BOX_MARGIN), BOX_MIN_PX)
        mid = 0.5 * (lo + hi)
        lo = np.maximum(mid - size / 2, 0.0)
        hi = np.minimum(mid + size / 2, [W, H])
        out[k] = [(lo[0] + hi[0]) / (2 * W), (lo[1] + hi[1]) / (2 * H), (hi[0] - lo[0]) / W, (hi[1] - lo[1]) / H]
    return out


def _geometry(template: BodyTemplate, params: SmplxParams, cam: CameraModel, H: int, W: int):
    mesh = smplx_forward(template, params)
    verts, joints = np.asarray(mesh.vertices.data), np.asarray(mesh.joints.data)
    vc, jc = verts + [0, 0, cam.distance], joints + [0, 0, cam.distance]
    if jc[:, 2].min() <= 0.1 or vc[:, 2].min() <= 0.1:
        raise OutOfFrameError("body behind the camera")
    vp = np.asarray(project_points(vc, cam).data)
    jp = np.asarray(project_points(jc, cam).data)
    gt = GroundTruth(params=params, kpt3d=joints, kpt2d=jp, visible=in_frame(jp, H, W),
                     boxes=component_boxes(template, vp, jp, H, W), mesh=verts)
    return gt, vc, jc, vp


def label(template: BodyTemplate, params: SmplxParams, cam: CameraModel, H: int, W: int):
    """Run the body model and derive image, 3D/2D keypoints, visibility and boxes."""
    gt, vc, jc, _ = _geometry(template, params, cam, H, W)
    return render(template, vc, jc, cam, H, W), gt


def synth_sample(rng: np.random.Generator, template: BodyTemplate, cam: CameraModel, H: int, W: int,
                 sample_id: int = 0, seed: int = 0) -> SynthSample:
    """Draw parameters until every joint and vertex projects inside the image (at most 20 tries)."""
    for _ in range(MAX_ATTEMPTS):
        params = sample_params(rng)
        try:
            gt, vc, jc, vp = _geometry(template, params, cam, H, W)
        except OutOfFrameError:
            continue
        if gt.visible.all() and in_frame(vp, H, W).all():
            return SynthSample(image=render(template, vc, jc, cam, H, W), gt=gt, sample_id=sample_id, seed=seed)
    raise OutOfFrameError(f"sample {sample_id}: body left the frame in {MAX_ATTEMPTS} attempts")


def stack_gt(gts: list[GroundTruth]) -> GroundTruth:
    params = SmplxParams(**{k: np.stack([getattr(g.params, k) for g in gts]) for k in vars(gts[0].params)})
    return GroundTruth(params=params, **{k: np.stack([getattr(g, k) for g in gts])
                                         for k in ("kpt3d", "kpt2d", "visible", "boxes", "mesh")})


def make_dataset(template: BodyTemplate, cam: CameraModel, H: int, W: int, n: int, seed: int,
                 pixel_noise: float = 0.0) -> Dataset:
    """Sample ``i`` draws from ``default_rng([seed, i])``, so datasets are prefix-stable."""
    samples = [synth_sample(np.random.default_rng([seed, i]), template, cam, H, W, i, seed) for i in range(n)]
    images = np.stack([s.image for s in samples])
    if pixel_noise:
        images = images + np.random.default_rng([seed, n, 7]).normal(scale=pixel_noise, size=images.shape)
    return Dataset(images=images, gt=stack_gt([s.gt for s in samples]), ids=np.arange(n), seed=seed)


# ---------------------------------------------------------------- augmentation

def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment_params(rng: np.random.Generator, template: BodyTemplate, params: SmplxParams, cam: CameraModel,
                   cfg: DataConfig) -> SmplxParams:
    """Flip, in-plane rotation and scale, all expressed as a change of SMPL-X parameters."""
    p = params.numpy()
    if rng.uniform() < cfg.flip_prob:
        p = flip_params(p)
    a = np.deg2rad(rng.uniform(-cfg.rot_deg, cfg.rot_deg))
    s = rng.uniform(1 - cfg.scale_range, 1 + cfg.scale_range)
    Rz = _rot_z(a)
    _, rest_joints = shape_blend(template, p.beta, p.phi)
    j0 = np.asarray(rest_joints.data)[0]
    root = Rz @ _rodrigues_np(p.theta_body[0])
    theta = p.theta_body.copy()
    theta[0] = _matrix_to_axis_angle(root)
    t = Rz @ (j0 + p.t) - j0
    # scaling the image by s about the principal point == dividing camera depth by s
    t[2] = (cam.distance + t[2]) / s - cam.distance
    return SmplxParams(theta_body=theta, beta=p.beta, t=t, theta_lhand=p.theta_lhand,
                       theta_rhand=p.theta_rhand, theta_jaw=p.theta_jaw, phi=p.phi)


def _matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def color_jitter(rng: np.random.Generator, image: np.ndarray, strength: float) -> np.ndarray:
    gain = rng.uniform(1 - strength, 1 + strength, 3)
    bias = rng.uniform(-strength, strength)
    return np.clip(image * gain + bias, -1.0, 1.0)


def augmented_batch(rng: np.random.Generator, template: BodyTemplate, cam: CameraModel, data: Dataset,
                    idx, cfg: DataConfig, H: int, W: int) -> tuple[np.ndarray, GroundTruth]:
    """Re-render each selected sample under a random augmentation."""
    images, gts = [], []
    for i in idx:
        base = data.gt.index(i).params
        params = augment_params(rng, template, base, cam, cfg)
        try:
            img, gt = label(template, params, cam, H, W)
        except OutOfFrameError:
            img, gt = data.images[i], data.gt.index(i)
        images.append(color_jitter(rng, img, cfg.color_jitter))
        gts.append(gt)
    return np.stack(images), stack_gt(gts)
