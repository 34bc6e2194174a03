"""Inference over a dataset and aggregation into a :class:`MetricsReport`."""
from __future__ import annotations

import numpy as np

from ..body.smplx import SmplxParams, smplx_forward
from ..body.template import BodyTemplate
from ..losses import CameraModel
from ..metrics import MetricsReport, f1_match, mesh_errors
from ..model import CatModel
from .synth import Dataset

PARAM_GROUPS = {
    "body": ("theta_body",),
    "hands": ("theta_lhand", "theta_rhand"),
    "face": ("theta_jaw", "phi"),
    "shape": ("beta",),
    "translation": ("t",),
}


def predict(model: CatModel, images: np.ndarray, batch_size: int = 16) -> SmplxParams:
    """Batched forward without a tape; returns numpy parameters with a leading sample axis."""
    chunks = []
    for i in range(0, len(images), batch_size):
        chunks.append(model(images[i:i + batch_size].astype(model.dtype, copy=False)).params.numpy())
    return SmplxParams(**{k: np.concatenate([getattr(c, k) for c in chunks]).astype(np.float64)
                          for k in vars(chunks[0])})


def param_l1(pred: SmplxParams, gt: SmplxParams) -> dict:
    """Mean absolute parameter error per group, averaged over samples and scalars."""
    out = {}
    for group, names in PARAM_GROUPS.items():
        diffs = [np.abs(np.asarray(getattr(pred, n)) - np.asarray(getattr(gt, n))).reshape(len(gt.beta), -1)
                 for n in names]
        out[group] = float(np.concatenate(diffs, axis=1).mean())
    return out


def evaluate(model: CatModel | None, template: BodyTemplate, cam: CameraModel, data: Dataset,
             oracle: bool = False, radius: float = 0.3, batch_size: int = 16) -> MetricsReport:
    """Score ``model`` on ``data``. ``oracle=True`` feeds the ground-truth parameters instead."""
    gt = data.gt.params
    pred = gt if oracle else predict(model, data.images, batch_size)
    per_sample, matched = [], 0
    for i in range(len(data)):
        p = SmplxParams(**{k: np.asarray(getattr(pred, k))[i] for k in vars(pred)})
        mesh = smplx_forward(template, p)
        pv, pj = np.asarray(mesh.vertices.data), np.asarray(mesh.joints.data)
        gv, gj = data.gt.mesh[i], data.gt.kpt3d[i]
        per_sample.append(mesh_errors(pv, gv, pj, gj, template.component_masks))
        _, m = f1_match(pj[:1], gj[:1], radius)
        matched += len(m)
    report = MetricsReport.aggregate(per_sample, matched, len(data), len(data))
    report.param_l1 = param_l1(pred, gt)
    return report
