"""Evaluation metrics: similarity alignment, per-component mesh/joint errors, detection F1."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .body.template import COMPONENT_JOINTS, HEAD, JAW, NECK
from .decoder import DegenerateInputWarning

REPORT_COMPONENTS = ("all", "body", "hands", "face")
ERROR_KEYS = ("mpvpe", "pa_mpvpe", "mpjpe", "pa_mpjpe")
FACE_EVAL_JOINTS = (NECK, HEAD, JAW)  # need >= 3 points for alignment
SCHEMA_VERSION = 1


def procrustes_align(X, Y) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity ``(s, R, t)`` minimising ``sum ||s R x_i + t - y_i||^2``, with ``det R = +1``."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"procrustes_align: need matching n x 3 inputs, got {X.shape} and {Y.shape}")
    if X.shape[0] < 3:
        raise ValueError("procrustes_align: need at least 3 points")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    var_x = (Xc ** 2).sum() / len(X)
    if var_x <= 1e-300:
        raise ValueError("procrustes_align: source points are all coincident")
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    if D[1] <= 1e-12 * max(D[0], 1e-300):
        warnings.warn("procrustes_align: rank-deficient covariance, rotation not unique",
                      DegenerateInputWarning, stacklevel=2)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    s = float((D * S).sum() / var_x)
    t = my - s * R @ mx
    return s, R, t


def apply_similarity(X, s, R, t):
    return s * np.asarray(X) @ R.T + t


def _mean_dist(a, b) -> float:
    return float(np.linalg.norm(a - b, axis=-1).mean())


def _pa_dist(a, b) -> float:
    # the least-squares fit can lose to the identity on mean distance; keep the better of the two
    s, R, t = procrustes_align(a, b)
    return min(_mean_dist(apply_similarity(a, s, R, t), b), _mean_dist(a, b))


def _pair(a, b, idx):
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ValueError("mesh_errors: empty component mask")
    return a[idx], b[idx]


def mesh_errors(predV, gtV, predJ, gtJ, masks: dict) -> dict:
    """Per-component ``{mpvpe, pa_mpvpe, mpjpe, pa_mpjpe}`` in millimetres for one sample.

    ``masks`` maps ``body/lhand/rhand/face`` to vertex indices. Alignment is
    solved per component on that component's own points; hands report the
    mean of the left and right errors.
    """
    predV, gtV, predJ, gtJ = (np.asarray(a, dtype=float) for a in (predV, gtV, predJ, gtJ))
    if predV.shape != gtV.shape or predJ.shape != gtJ.shape:
        raise ValueError("mesh_errors: prediction and ground truth sizes differ")
    jmasks = {"body": COMPONENT_JOINTS["body"], "lhand": COMPONENT_JOINTS["lhand"],
              "rhand": COMPONENT_JOINTS["rhand"], "face": list(FACE_EVAL_JOINTS)}

    def errs(vidx, jidx) -> dict:
        pv, gv = (predV, gtV) if vidx is None else _pair(predV, gtV, vidx)
        pj, gj = (predJ, gtJ) if jidx is None else _pair(predJ, gtJ, jidx)
        return {"mpvpe": _mean_dist(pv, gv), "pa_mpvpe": _pa_dist(pv, gv),
                "mpjpe": _mean_dist(pj, gj), "pa_mpjpe": _pa_dist(pj, gj)}

    out = {"all": errs(None, None), "body": errs(masks["body"], jmasks["body"]),
           "face": errs(masks["face"], jmasks["face"])}
    left, right = errs(masks["lhand"], jmasks["lhand"]), errs(masks["rhand"], jmasks["rhand"])
    out["hands"] = {k: 0.5 * (left[k] + right[k]) for k in ERROR_KEYS}
    return {c: {k: 1000.0 * v for k, v in out[c].items()} for c in REPORT_COMPONENTS}


def f1_match(pred_people, gt_people, radius: float = 0.3) -> tuple[float, list[tuple[int, int]]]:
    """Greedy one-to-one matching of root positions within ``radius``.

    Candidate pairs are taken in order of distance, ties broken by
    ``(pred index, gt index)``. Returns ``(F1, [(pred_i, gt_j), ...])``.
    """
    if radius <= 0:
        raise ValueError("f1_match: radius must be positive")
    P = np.asarray(pred_people, dtype=float).reshape(-1, 3)
    G = np.asarray(gt_people, dtype=float).reshape(-1, 3)
    if len(P) and len(G):
        d = np.linalg.norm(P[:, None] - G[None], axis=-1)
        cand = sorted((d[i, j], i, j) for i, j in zip(*np.nonzero(d <= radius)))
    else:
        cand = []
    used_p, used_g, matches = set(), set(), []
    for _, i, j in cand:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            matches.append((int(i), int(j)))
    return f1_score(len(matches), len(P), len(G)), matches


def f1_score(tp: int, n_pred: int, n_gt: int) -> float:
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def nmve(error_mm: float, f1: float) -> float | None:
    """Error divided by F1; ``None`` when F1 is zero (undefined)."""
    if not 0.0 <= f1 <= 1.0:
        raise ValueError(f"F1 must lie in [0, 1], got {f1}")
    if f1 == 0.0:
        return None
    return error_mm / f1


nmje = nmve


@dataclass
class MetricsReport:
    """Aggregated evaluation result. Serialised by :meth:`to_json`; see README for the schema."""
    errors: dict = field(default_factory=dict)   # component -> {mpvpe, pa_mpvpe, mpjpe, pa_mpjpe}
    f1: float = 0.0
    nmve: float | None = None
    nmje: float | None = None
    n_samples: int = 0
    n_pred: int = 0
    n_gt: int = 0
    param_l1: dict = field(default_factory=dict)  # parameter group -> mean |pred - gt|
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def aggregate(cls, per_sample: list[dict], n_matched: int, n_pred: int, n_gt: int) -> "MetricsReport":
        errors = {}
        for c in REPORT_COMPONENTS:
            errors[c] = {k: float(math.fsum(s[c][k] for s in per_sample) / len(per_sample)) if per_sample else 0.0
                         for k in ERROR_KEYS}
        f1 = f1_score(n_matched, n_pred, n_gt)
        return cls(errors=errors, f1=f1, nmve=nmve(errors["all"]["mpvpe"], f1),
                   nmje=nmje(errors["all"]["mpjpe"], f1), n_samples=len(per_sample), n_pred=n_pred, n_gt=n_gt)

    def violations(self, tol: float = 1e-9) -> list[str]:
        out = []
        for c, e in self.errors.items():
            if any(v < 0 for v in e.values()):
                out.append(f"{c}: negative error")
            for raw in ("mpvpe", "mpjpe"):
                if e[f"pa_{raw}"] > e[raw] + tol:
                    out.append(f"{c}: pa_{raw} {e[f'pa_{raw}']:.6g} > {raw} {e[raw]:.6g}")
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported metrics schema {d.get('schema_version')!r}")
        return cls(**d)
