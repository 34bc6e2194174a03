"""Pinhole camera and the four-term L1 training objective."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import ops
from .autodiff.tape import Tensor, as_tensor
from .body.smplx import SmplxParams, smplx_forward
from .body.template import BodyTemplate
from .decoder import DegenerateInputWarning

Z_MIN = 1e-4
LOSS_TERMS = ("smplx", "kpt3d", "kpt2d", "bbox")


@dataclass(frozen=True)
class CameraModel:
    """Fixed pinhole looking down +z; world points sit ``distance`` metres in front of it."""
    focal: tuple[float, float]
    principal: tuple[float, float]
    distance: float = 0.0

    def __post_init__(self):
        if min(self.focal) <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.focal}")

    @classmethod
    def for_image(cls, H: int, W: int, fill: float = 0.8, body_height: float = 1.75) -> "CameraModel":
        """fx = fy = 5000 * H / 256, principal point at the centre, depth chosen so the body spans ``fill`` of H."""
        f = 5000.0 * H / 256.0
        return cls(focal=(f, f), principal=(W / 2.0, H / 2.0), distance=f * body_height / (fill * H))

    def to_camera(self, X):
        return ops.add(X, np.array([0.0, 0.0, self.distance]))


def project_points(X, cam: CameraModel, z_min: float = Z_MIN):
    """Camera-frame points ``[..., 3]`` -> pixels ``[..., 2]``.

    Depths at or below ``z_min`` are clamped (with a :class:`DegenerateInputWarning`).
    """
    X = as_tensor(X)
    z = X[..., 2:3]
    if np.any(z.data <= z_min):
        warnings.warn(f"project_points: depth <= {z_min} clamped", DegenerateInputWarning, stacklevel=2)
        z = ops.maximum(z, z_min)
    uv = ops.div(X[..., 0:2], z)
    return ops.add(ops.mul(uv, np.asarray(cam.focal, dtype=float)), np.asarray(cam.principal, dtype=float))


@dataclass
class GroundTruth:
    """Supervision for a batch; any field may be ``None`` if its loss weight is zero."""
    params: SmplxParams | None = None
    kpt3d: np.ndarray | None = None     # N, J, 3 metres (world frame)
    kpt2d: np.ndarray | None = None     # N, J, 2 pixels
    visible: np.ndarray | None = None   # N, J bool
    boxes: np.ndarray | None = None     # N, 3, 4 normalised (cx, cy, w, h)
    mesh: np.ndarray | None = None      # N, V, 3

    def index(self, idx) -> "GroundTruth":
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                out[f.name] = None
            elif isinstance(v, SmplxParams):
                out[f.name] = SmplxParams(**{g.name: getattr(v, g.name)[idx] for g in fields(v)})
            else:
                out[f.name] = v[idx]
        return GroundTruth(**out)


@dataclass(frozen=True)
class LossWeights:
    smplx: float = 1.0
    kpt3d: float = 1.0
    kpt2d: float = 1.0
    bbox: float = 1.0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in LOSS_TERMS}


def _l1(a, b):
    return ops.mean(ops.abs(ops.sub(a, b)))


def loss_total(pred, gt: GroundTruth, cam: CameraModel, weights: LossWeights, template: BodyTemplate):
    """Weighted sum of mean-reduced L1 terms. Returns ``(total, {term: Tensor})``.

    ``pred`` needs ``.params`` (SmplxParams) and ``.boxes``. Terms with weight 0
    are skipped entirely; a nonzero weight with its target missing raises.
    """
    w = weights.as_dict()
    needed = {"smplx": ("params",), "kpt3d": ("kpt3d",), "kpt2d": ("kpt2d", "visible"), "bbox": ("boxes",)}
    for term, attrs in needed.items():
        for a in attrs:
            if w[term] and getattr(gt, a) is None:
                raise ValueError(f"loss term {term!r} has weight {w[term]} but ground truth {a!r} is missing")

    terms = {}
    if w["smplx"]:
        terms["smplx"] = _l1(pred.params.to_vector(), gt.params.to_vector())
    if w["kpt3d"] or w["kpt2d"]:
        joints = smplx_forward(template, pred.params).joints
        if w["kpt3d"]:
            terms["kpt3d"] = _l1(joints, gt.kpt3d)
        if w["kpt2d"]:
            uv = project_points(cam.to_camera(joints), cam)
            vis = np.asarray(gt.visible, dtype=float)[..., None]
            n = max(2.0 * vis.sum(), 1.0)
            terms["kpt2d"] = ops.div(ops.sum(ops.mul(ops.abs(ops.sub(uv, gt.kpt2d)), vis)), n)
    if w["bbox"]:
        terms["bbox"] = _l1(pred.boxes, gt.boxes)

    total = None
    for k, v in terms.items():
        term = ops.mul(v, w[k])
        total = term if total is None else ops.add(total, term)
    if total is None:
        total = Tensor(np.zeros(()))
    return total, terms
