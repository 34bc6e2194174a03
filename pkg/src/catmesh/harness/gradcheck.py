"""Finite-difference verification of every differentiable op used by the model.

Each registered case builds small random float64 inputs and a scalar function of
them; outputs are contracted with a fixed random tensor so the whole Jacobian is
exercised. Inputs for ops with derivative kinks (bilinear sampling, L1) are drawn
so no sample sits within a few step sizes of a kink.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import decoder as dec
from .. import layers
from ..autodiff import ops
from ..autodiff.fd import grad_error
from ..body.smplx import SmplxParams, forward_kinematics, lbs, rodrigues, smplx_forward
from ..body.template import TemplateConfig, make_toy_template
from ..losses import CameraModel, GroundTruth, LossWeights, loss_total, project_points

TOL = 1e-4
STEP = 1e-3
KINK_MARGIN = 0.02


@dataclass
class Case:
    fn: Callable
    inputs: list
    wrt: list | None = None
    max_coords: int | None = None


@dataclass
class OpResult:
    name: str
    max_rel_err: float
    passed: bool
    seconds: float
    error: str | None = None


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)
    tol: float = TOL

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def format(self) -> str:
        lines = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            extra = f"  ({r.error})" if r.error else ""
            lines.append(f"{status}  {r.name:<22} max rel err {r.max_rel_err:.3e}  {r.seconds:6.2f}s{extra}")
        lines.append(f"{'all passed' if self.ok else 'FAILED: ' + ', '.join(self.failures)} (tol {self.tol:g})")
        return "\n".join(lines)


def _contract(out, rng_seed: int = 123):
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return ops.sum(ops.mul(out, w))


def _away_from_int(x, margin: float = KINK_MARGIN) -> bool:
    f = np.asarray(x) % 1.0
    return bool(np.all((f > margin) & (f < 1 - margin)))


def _pack(P: dict):
    names = sorted(P)
    return names, [P[n] for n in names]


# ---------------------------------------------------------------- cases

def case_elementwise(rng):
    x = rng.uniform(0.5, 2.0, (3, 4))
    return Case(lambda a: _contract(ops.add(ops.add(ops.exp(ops.sin(a)), ops.log(a)),
                                            ops.add(ops.tanh(ops.cos(a)), ops.div(ops.sqrt(a), ops.sigmoid(a))))), [x])


def case_matmul(rng):
    return Case(lambda a, b: _contract(ops.matmul(a, b)), [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))])


def case_layer_norm(rng):
    return Case(lambda x, g, b: _contract(ops.layer_norm(x, g, b, 1e-6)),
                [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)])


def case_softmax(rng):
    return Case(lambda x: _contract(ops.softmax(x, axis=-1)), [rng.normal(size=(3, 5))])


def case_gelu(rng):
    return Case(lambda x: _contract(ops.gelu(x)), [rng.normal(scale=2.0, size=(4, 5))])


def case_conv_transpose2d(rng):
    return Case(lambda x, k: _contract(ops.conv_transpose2d(x, k, 2)),
                [rng.normal(size=(2, 3, 3, 2)), rng.normal(size=(3, 2, 4, 4))])


def case_upsample(rng):
    C = 3
    P = {"dec.up.0.w": rng.normal(size=(C, C, 4, 4)), "dec.up.0.b": rng.normal(size=C),
         "dec.up.1.w": rng.normal(size=(C, C, 4, 4)), "dec.up.1.b": rng.normal(size=C)}
    names, vals = _pack(P)

    def fn(x, *w):
        maps = dec.upsample_multiscale(x, dict(zip(names, w)), (1, 2, 4))
        return ops.add(_contract(maps[1], 1), _contract(maps[2], 2))
    return Case(fn, [rng.normal(size=(1, C, 2, 3))] + vals)


def case_bilinear_sample(rng):
    H, W = 5, 6
    pts = np.stack([rng.uniform(0.1, W - 1.1, (2, 7)), rng.uniform(0.1, H - 1.1, (2, 7))], axis=-1)
    while not _away_from_int(pts):
        pts = np.stack([rng.uniform(0.1, W - 1.1, (2, 7)), rng.uniform(0.1, H - 1.1, (2, 7))], axis=-1)
    return Case(lambda m, p: _contract(ops.bilinear_sample(m, p)), [rng.normal(size=(2, 3, H, W)), pts])


def case_roi_align(rng):
    H, W, oh, ow = 6, 5, 3, 4
    while True:
        box = np.concatenate([rng.uniform(0.35, 0.65, (2, 2)), rng.uniform(0.3, 0.6, (2, 2))], axis=1)
        jj = (np.arange(ow) + 0.5) / ow - 0.5
        ii = (np.arange(oh) + 0.5) / oh - 0.5
        px = (box[:, :1] + box[:, 2:3] * jj) * W - 0.5
        py = (box[:, 1:2] + box[:, 3:4] * ii) * H - 0.5
        if _away_from_int(px) and _away_from_int(py):
            break
    return Case(lambda m, b: _contract(dec.roi_align(m, b, oh, ow)), [rng.normal(size=(2, 3, H, W)), box])


def case_soft_argmax(rng):
    return Case(lambda h: _contract(dec.soft_argmax(h)[0]), [rng.normal(size=(2, 3, 4, 5))])


def case_sine_embed(rng):
    return Case(lambda p: _contract(dec.sine_embed(p, 8, temperature=20.0)), [rng.uniform(0, 1, (2, 3, 2))])


def case_mhsa(rng):
    C = 8
    P = {k: rng.normal(scale=0.3, size=s) for k, (s, _) in layers.block_spec("b", C, 2).items()}
    names, vals = _pack(P)
    return Case(lambda x, *w: _contract(layers.transformer_block(x, dict(zip(names, w)), "b", 2)),
                [rng.normal(size=(2, 4, C))] + vals, max_coords=40)


def _deform_inputs(rng, N=1, K=3, Cp=8, heads=2, n_points=2, sizes=((4, 4), (8, 8))):
    L = len(sizes)
    P = {k: rng.normal(scale=0.3, size=s) for k, (s, _) in dec.deform_attn_spec("ca", Cp, heads, L, n_points).items()}
    P["ca.off.b"] = rng.uniform(-1.0, 1.0, P["ca.off.b"].shape)
    Q = rng.normal(size=(N, K, Cp))
    V = [rng.normal(size=(N, Cp, h, w)) for h, w in sizes]
    ref = rng.uniform(0.25, 0.75, (N, K, 2))
    return P, Q, V, ref


def _deform_locations(P, Q, ref, sizes, heads, n_points):
    N, K, _ = Q.shape
    off = (Q @ P["ca.off.w"] + P["ca.off.b"]).reshape(N, K, heads, len(sizes), n_points, 2)
    locs = []
    for l, (h, w) in enumerate(sizes):
        base = ref * [w, h] - 0.5
        loc = base[:, :, None, None] + off[:, :, :, l]
        inside = np.all((loc[..., 0] > 0.05) & (loc[..., 0] < w - 1.05) & (loc[..., 1] > 0.05) & (loc[..., 1] < h - 1.05))
        locs.append((loc, inside))
    return locs


def case_deformable_attn(rng):
    heads, n_points, sizes = 2, 2, ((4, 4), (8, 8))
    while True:
        P, Q, V, ref = _deform_inputs(rng, heads=heads, n_points=n_points, sizes=sizes)
        locs = _deform_locations(P, Q, ref, sizes, heads, n_points)
        if all(inside and _away_from_int(loc) for loc, inside in locs):
            break
    names, vals = _pack(P)
    L = len(V)

    def fn(q, r, *rest):
        vs, w = rest[:L], dict(zip(names, rest[L:]))
        return _contract(dec.deformable_cross_attn(q, list(vs), r, w, "ca", heads, n_points))
    return Case(fn, [Q, ref] + V + vals, max_coords=30)


def case_rodrigues(rng):
    aa = rng.normal(size=(4, 3))
    return Case(lambda a: _contract(rodrigues(a)), [aa])


def case_forward_kinematics(rng):
    J = 8
    parents = np.array([-1, 0, 1, 2, 0, 4, 1, 6])
    return Case(lambda j, R: ops.add(_contract(forward_kinematics(j, R, parents)[0], 1),
                                     _contract(forward_kinematics(j, R, parents)[1], 2)),
                [rng.normal(size=(2, J, 3)), rng.normal(size=(2, J, 3, 3))])


def case_lbs(rng):
    V, J = 6, 4
    w = rng.uniform(0.1, 1.0, (V, J))
    w /= w.sum(1, keepdims=True)
    A = np.concatenate([rng.normal(size=(2, J, 3, 4)), np.tile([0.0, 0.0, 0.0, 1.0], (2, J, 1, 1))], axis=2)
    return Case(lambda v, a: _contract(lbs(v, a, w)), [rng.normal(size=(2, V, 3)), A])


_TEMPLATE = None


def _template():
    global _TEMPLATE
    if _TEMPLATE is None:
        _TEMPLATE = make_toy_template(TemplateConfig.minimal())
    return _TEMPLATE


def case_smplx_forward(rng):
    tpl = _template()

    def fn(vec):
        mesh = smplx_forward(tpl, SmplxParams.from_vector(vec))
        return ops.add(_contract(mesh.vertices, 1), _contract(mesh.joints, 2))
    vec = rng.uniform(-0.5, 0.5, 182)
    return Case(fn, [vec], max_coords=60)


def case_projection(rng):
    cam = CameraModel(focal=(50.0, 60.0), principal=(8.0, 6.0))
    X = np.concatenate([rng.normal(size=(5, 2)), rng.uniform(2.0, 5.0, (5, 1))], axis=1)
    return Case(lambda x: _contract(project_points(x, cam)), [X])


def _offset(rng, shape, lo=0.05, hi=0.3):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def case_loss_total(rng):
    tpl = _template()
    cam = CameraModel(focal=(40.0, 40.0), principal=(12.0, 16.0), distance=4.0)
    N = 2
    vec = rng.uniform(-0.4, 0.4, (N, 182))
    boxes = rng.uniform(0.2, 0.8, (N, 3, 4))
    mesh = smplx_forward(tpl, SmplxParams.from_vector(vec))
    J = np.asarray(mesh.joints.data)
    uv = np.asarray(project_points(J + [0, 0, cam.distance], cam).data)
    gt = GroundTruth(params=SmplxParams.from_vector(vec + _offset(rng, vec.shape)),
                     kpt3d=J + _offset(rng, J.shape, 0.01, 0.05), kpt2d=uv + _offset(rng, uv.shape, 0.1, 1.0),
                     visible=rng.uniform(size=J.shape[:2]) < 0.8, boxes=boxes + _offset(rng, boxes.shape))

    class Pred:
        def __init__(self, v, b):
            self.params, self.boxes = SmplxParams.from_vector(v), b

    def fn(v, b):
        return loss_total(Pred(v, b), gt, cam, LossWeights(1.0, 2.0, 0.5, 1.5), tpl)[0]
    return Case(fn, [vec, boxes], max_coords=60)


REGISTRY: dict[str, Callable] = {
    "elementwise": case_elementwise,
    "matmul": case_matmul,
    "layer_norm": case_layer_norm,
    "softmax": case_softmax,
    "gelu": case_gelu,
    "conv_transpose2d": case_conv_transpose2d,
    "upsample_multiscale": case_upsample,
    "bilinear_sample": case_bilinear_sample,
    "roi_align": case_roi_align,
    "soft_argmax": case_soft_argmax,
    "sine_embed": case_sine_embed,
    "transformer_block": case_mhsa,
    "deformable_attn": case_deformable_attn,
    "rodrigues": case_rodrigues,
    "forward_kinematics": case_forward_kinematics,
    "lbs": case_lbs,
    "smplx_forward": case_smplx_forward,
    "projection": case_projection,
    "loss_total": case_loss_total,
}


def gradcheck(names=None, seed: int = 0, tol: float = TOL, h: float = STEP) -> GradcheckReport:
    """Run the selected cases (all by default) and report the worst relative error of each."""
    names = list(REGISTRY) if names is None else list(names)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown gradcheck op(s): {', '.join(unknown)}")
    report = GradcheckReport(tol=tol)
    for k, name in enumerate(names):
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        try:
            case = REGISTRY[name](rng)
            err = grad_error(case.fn, case.inputs, h=h, max_coords=case.max_coords,
                             rng=np.random.default_rng([seed, k, 1]), wrt=case.wrt)
            result = OpResult(name, err, bool(err < tol), time.perf_counter() - t0)
        except Exception as e:  # a crash is a failed check, not a harness failure
            result = OpResult(name, float("inf"), False, time.perf_counter() - t0, f"{type(e).__name__}: {e}")
        report.results.append(result)
    return report
