"""High-resolution component decoder for hands and face.

Feature maps are upsampled by transposed convolutions, cropped per component
with a differentiable RoIAlign, and refined by keypoint-guided deformable
attention. Normalised coordinates are ``(x, y)`` in ``[0, 1]`` over a crop;
level ``l`` with ``h_l x w_l`` samples maps them to pixels as
``x * w_l - 0.5`` (bin centres land on integer sample positions).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import layers
from .autodiff import ops
from .body.template import N_EXPR, N_HAND

MIN_BOX = 1e-6


class DegenerateInputWarning(RuntimeWarning):
    """Raised (as a warning) when an input had to be clamped to stay well defined."""


@dataclass(frozen=True)
class DecoderConfig:
    enabled: bool = True
    keypoint_guided: bool = True
    scales: tuple = (1, 2, 4)
    crop_h: int = 8
    crop_w: int = 8
    C_prime: int | None = None   # defaults to C // 2
    K_hand: int = 21
    K_face: int = 50
    n_blocks: int = 2
    n_points: int = 4
    heads: int = 8
    mlp_ratio: int = 4
    head_hidden: int = 256

    def width(self, C: int) -> int:
        return self.C_prime if self.C_prime is not None else C // 2

    def validate(self, C: int) -> None:
        if not self.scales:
            raise ValueError("decoder.scales must be non-empty")
        for s in self.scales:
            if s < 1 or s & (s - 1):
                raise ValueError(f"decoder scale {s} is not a positive power of two")
        if list(self.scales) != sorted(set(self.scales)):
            raise ValueError("decoder.scales must be strictly increasing")
        Cp = self.width(C)
        if Cp % self.heads:
            raise ValueError(f"C'={Cp} not divisible by decoder heads={self.heads}")
        if Cp % 4:
            raise ValueError(f"C'={Cp} must be divisible by 4 for the sine embedding")
        if self.n_points < 1 or self.n_blocks < 0:
            raise ValueError("n_points must be >= 1 and n_blocks >= 0")


def ring_offsets(heads: int, n_levels: int, n_points: int, radius: float = 1.0) -> np.ndarray:
    """Initial sampling offsets: points on a circle of ``radius`` pixels, rotated per head."""
    out = np.zeros((heads, n_levels, n_points, 2))
    for h in range(heads):
        for k in range(n_points):
            ang = 2 * math.pi * (k / n_points + h / (heads * n_points))
            out[h, :, k] = radius * math.cos(ang), radius * math.sin(ang)
    return out


def deform_attn_spec(name: str, Cp: int, heads: int, n_levels: int, n_points: int) -> dict:
    n = heads * n_levels * n_points
    return {
        f"{name}.off.w": ((Cp, 2 * n), "zeros"),
        f"{name}.off.b": ((2 * n,), ring_offsets(heads, n_levels, n_points)),
        f"{name}.attw.w": ((Cp, n), "zeros"),
        f"{name}.attw.b": ((n,), "zeros"),
        **layers.linear_spec(f"{name}.value", Cp, Cp),
        **layers.linear_spec(f"{name}.out", Cp, Cp),
    }


def component_specs(comp: str, C: int, K: int, n_out: int, cfg: DecoderConfig) -> dict:
    Cp = cfg.width(C)
    L = len(cfg.scales)
    specs = {
        **layers.linear_spec(f"{comp}.input_proj", C, Cp),
        f"{comp}.query": ((K, Cp), "normal"),
    }
    if cfg.keypoint_guided:
        specs.update(layers.linear_spec(f"{comp}.kpt", C, K))
        specs.update(layers.linear_spec(f"{comp}.tok_proj", C, Cp))
    else:
        specs.update(layers.linear_spec(f"{comp}.ref", Cp, 2))
    for i in range(cfg.n_blocks):
        b = f"{comp}.blocks.{i}"
        specs.update(layers.ln_spec(f"{b}.ln1", Cp))
        specs.update(layers.mhsa_spec(f"{b}.attn", Cp))
        specs.update(layers.ln_spec(f"{b}.ln2", Cp))
        specs.update(deform_attn_spec(f"{b}.ca", Cp, cfg.heads, L, cfg.n_points))
        specs.update(layers.ln_spec(f"{b}.ln3", Cp))
        specs.update(layers.ffn_spec(f"{b}.mlp", Cp, cfg.mlp_ratio * Cp))
    specs.update(layers.ln_spec(f"{comp}.head_norm", Cp))
    specs.update(layers.ffn_spec(f"{comp}.head", K * Cp, cfg.head_hidden, n_out, zero_last=True))
    return specs


def decoder_specs(C: int, cfg: DecoderConfig) -> dict:
    specs = {}
    n_up = int(math.log2(max(cfg.scales)))
    for i in range(n_up):
        specs[f"dec.up.{i}.w"] = ((C, C, 4, 4), "normal")
        specs[f"dec.up.{i}.b"] = ((C,), "zeros")
    specs.update(component_specs("hand", C, cfg.K_hand, N_HAND * 3, cfg))
    specs.update(component_specs("face", C, cfg.K_face, 3 + N_EXPR, cfg))
    return specs


# ---------------------------------------------------------------- feature maps

def tokens_to_map(T_f, grid: tuple[int, int]):
    """``[N, h*w, C]`` -> ``[N, C, h, w]``."""
    N, T, C = T_f.shape
    h, w = grid
    return ops.transpose(ops.reshape(T_f, (N, h, w, C)), (0, 3, 1, 2))


def upsample_multiscale(fmap, P: dict, scales) -> list:
    """Scale 1 is ``fmap`` itself; scale ``2^k`` applies ``k`` chained stride-2 deconvolutions."""
    out, cur, level = {1: fmap}, fmap, 1
    i = 0
    while level < max(scales):
        x = cur if i == 0 else ops.gelu(cur)
        cur = ops.conv_transpose2d(x, P[f"dec.up.{i}.w"], stride=2)
        cur = ops.add(cur, ops.reshape(P[f"dec.up.{i}.b"], (-1, 1, 1)))
        level *= 2
        i += 1
        out[level] = cur
    return [out[s] for s in scales]


def roi_align(fmap, box, out_h: int, out_w: int):
    """Crop ``fmap [N, C, H, W]`` inside normalised boxes ``[N, 4]`` (cx, cy, w, h).

    One bilinear sample per output bin, at the bin centre. Width/height below
    ``1e-6`` are clamped (with a :class:`DegenerateInputWarning`).
    """
    N, C, H, W = fmap.shape
    box = ops.as_tensor(box)
    cx, cy = box[:, 0:1], box[:, 1:2]
    bw, bh = box[:, 2:3], box[:, 3:4]
    if np.any(bw.data < MIN_BOX) or np.any(bh.data < MIN_BOX):
        warnings.warn("roi_align: degenerate box clamped to 1e-6", DegenerateInputWarning, stacklevel=2)
        bw, bh = ops.maximum(bw, MIN_BOX), ops.maximum(bh, MIN_BOX)
    jj = ((np.arange(out_w) + 0.5) / out_w - 0.5).astype(box.dtype)
    ii = ((np.arange(out_h) + 0.5) / out_h - 0.5).astype(box.dtype)
    px = ops.sub(ops.mul(ops.add(cx, ops.mul(bw, jj)), float(W)), 0.5)   # N, out_w
    py = ops.sub(ops.mul(ops.add(cy, ops.mul(bh, ii)), float(H)), 0.5)   # N, out_h
    zeros = np.zeros((N, out_h, out_w), dtype=fmap.dtype)
    X = ops.add(ops.reshape(px, (N, 1, out_w)), zeros)
    Y = ops.add(ops.reshape(py, (N, out_h, 1)), zeros)
    pts = ops.reshape(ops.stack([X, Y], axis=-1), (N, out_h * out_w, 2))
    samples = ops.bilinear_sample(fmap, pts)  # N, P, C
    return ops.reshape(ops.transpose(samples, (0, 2, 1)), (N, C, out_h, out_w))


def to_pixels(points, h: int, w: int):
    """Normalised ``(x, y)`` -> level pixel coordinates (the per-level rescaling)."""
    return ops.sub(ops.mul(points, np.array([w, h], dtype=float)), 0.5)


def soft_argmax(heatmaps):
    """Expected normalised ``(x, y)`` under a spatial softmax of ``[N, K, h, w]`` logits."""
    N, K, h, w = heatmaps.shape
    prob = ops.softmax(ops.reshape(heatmaps, (N, K, h * w)), axis=-1)
    xs = np.tile((np.arange(w) + 0.5) / w, h)
    ys = np.repeat((np.arange(h) + 0.5) / h, w)
    grid = np.stack([xs, ys], axis=-1).astype(heatmaps.dtype)  # h*w, 2
    return ops.matmul(prob, grid), prob


def regress_reference_keypoints(F_lr, P: dict, name: str):
    """1x1 conv to K heatmaps, then soft-argmax -> ``[N, K, 2]`` points and ``[N, K, h, w]`` logits."""
    heat = layers.pointwise(F_lr, P, f"{name}.kpt")
    points, _ = soft_argmax(heat)
    return points, heat


def sine_embed(points, dim: int, temperature: float = 10000.0):
    """Sinusoidal embedding of normalised ``(x, y)`` into ``dim`` channels."""
    if dim % 4:
        raise ValueError("sine embedding width must be divisible by 4")
    nf = dim // 4
    freqs = 2 * math.pi / temperature ** (np.arange(nf) / nf)
    parts = []
    for axis in (0, 1):
        arg = ops.mul(ops.reshape(points[..., axis], points.shape[:-1] + (1,)), freqs)
        parts += [ops.sin(arg), ops.cos(arg)]
    return ops.concat(parts, axis=-1)


def build_component_tokens(F_lr, ref_points, P: dict, name: str):
    """Reference-keypoint feature + positional embedding + learnable embedding."""
    N, C, h, w = F_lr.shape
    Cp = P[f"{name}.query"].shape[-1]
    feat = ops.bilinear_sample(F_lr, to_pixels(ref_points, h, w))
    return ops.add(ops.add(layers.linear(feat, P, f"{name}.tok_proj"), sine_embed(ref_points, Cp)), P[f"{name}.query"])


def deformable_cross_attn(Q, V_levels: list, ref_points, P: dict, name: str, heads: int, n_points: int,
                          trace: dict | None = None):
    """Multi-scale deformable cross-attention.

    ``out_q = W_out * sum_l sum_k A_lqk * (W V_l)(phi_l(p_q) + dp_lqk)`` per head,
    with offsets ``dp`` (level pixels) and logits of ``A`` predicted from the
    query; ``A`` is softmax-normalised over all levels and points of a head.
    """
    N, K, Cp = Q.shape
    L = len(V_levels)
    n_off = P[f"{name}.off.b"].shape[-1]
    if n_off != heads * L * n_points * 2:
        raise ValueError(f"{name}: weights expect {n_off // (2 * heads * n_points)} levels, got {L}")
    d = Cp // heads
    off = ops.reshape(layers.linear(Q, P, f"{name}.off"), (N, K, heads, L, n_points, 2))
    logits = ops.reshape(layers.linear(Q, P, f"{name}.attw"), (N, K, heads, L * n_points))
    A = ops.softmax(logits, axis=-1)
    if trace is not None:
        trace.setdefault("attn_weights", []).append(A.data)
        trace.setdefault("offsets", []).append(off.data)
    sampled = []
    for l, V in enumerate(V_levels):
        h_l, w_l = V.shape[-2:]
        Vh = ops.reshape(layers.pointwise(V, P, f"{name}.value"), (N, heads, d, h_l, w_l))
        base = ops.reshape(to_pixels(ref_points, h_l, w_l), (N, K, 1, 1, 2))
        loc = ops.add(base, off[:, :, :, l])                              # N, K, heads, P, 2
        loc = ops.reshape(ops.transpose(loc, (0, 2, 1, 3, 4)), (N, heads, K * n_points, 2))
        s = ops.bilinear_sample(Vh, loc)                                  # N, heads, K*P, d
        sampled.append(ops.reshape(s, (N, heads, K, n_points, d)))
    S = ops.reshape(ops.stack(sampled, axis=3), (N, heads, K, L * n_points, d))
    Ah = ops.reshape(ops.transpose(A, (0, 2, 1, 3)), (N, heads, K, L * n_points, 1))
    out = ops.sum(ops.mul(S, Ah), axis=3)                                 # N, heads, K, d
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (N, K, Cp))
    return layers.linear(out, P, f"{name}.out")


def decoder_forward(tokens, V_levels: list, ref_points, P: dict, name: str, cfg: DecoderConfig,
                    trace: dict | None = None):
    """``n_blocks`` of pre-norm (self-attn, deformable cross-attn, FFN); reference points stay fixed."""
    x = tokens
    for i in range(cfg.n_blocks):
        b = f"{name}.blocks.{i}"
        x = ops.add(x, layers.mhsa(layers.layer_norm(x, P, f"{b}.ln1"), P, f"{b}.attn", cfg.heads))
        x = ops.add(x, deformable_cross_attn(layers.layer_norm(x, P, f"{b}.ln2"), V_levels, ref_points, P,
                                             f"{b}.ca", cfg.heads, cfg.n_points, trace))
        x = ops.add(x, layers.ffn(layers.layer_norm(x, P, f"{b}.ln3"), P, f"{b}.mlp"))
    return x


def component_from_crops(crops: list, P: dict, name: str, cfg: DecoderConfig, trace: dict | None = None):
    """Tokens for one component from its per-level crops (level 0 is the base-scale crop ``F_lr``)."""
    F_lr = crops[0]
    N = F_lr.shape[0]
    V_levels = [layers.pointwise(c, P, f"{name}.input_proj") for c in crops[1:]]
    query = P[f"{name}.query"]
    K, Cp = query.shape
    if cfg.keypoint_guided:
        ref, heat = regress_reference_keypoints(F_lr, P, name)
        tokens = build_component_tokens(F_lr, ref, P, name)
        if trace is not None:
            trace[f"{name}.ref_points"] = ref.data
    else:
        q = ops.add(np.zeros((N, K, Cp), dtype=F_lr.dtype), query)
        ref = ops.sigmoid(layers.linear(q, P, f"{name}.ref"))
        tokens = ops.add(q, sine_embed(ref, Cp))
    return decoder_forward(tokens, V_levels, ref, P, name, cfg, trace)


def crop_levels(base_map, maps: list, box, cfg: DecoderConfig, mirror: bool = False) -> list:
    """``[F_lr, V_1, ..., V_L]``: the base-scale crop, then one crop per decoder scale.

    ``mirror`` flips every crop left-right (used for the left hand).
    """
    F_lr = roi_align(base_map, box, cfg.crop_h, cfg.crop_w)
    crops = [F_lr]
    for m, s in zip(maps, cfg.scales):
        crops.append(F_lr if s == 1 else roi_align(m, box, cfg.crop_h * s, cfg.crop_w * s))
    if mirror:
        crops = [c[..., ::-1] for c in crops]
    return crops


def regress_hand(tokens, P: dict, name: str = "hand"):
    N, K, Cp = tokens.shape
    x = ops.reshape(layers.layer_norm(tokens, P, f"{name}.head_norm"), (N, K * Cp))
    return ops.reshape(layers.ffn(x, P, f"{name}.head"), (N, N_HAND, 3))


def regress_face(tokens, P: dict, name: str = "face"):
    N, K, Cp = tokens.shape
    x = ops.reshape(layers.layer_norm(tokens, P, f"{name}.head_norm"), (N, K * Cp))
    out = layers.ffn(x, P, f"{name}.head")
    return out[:, :3], out[:, 3:]


MIRROR_AA = np.array([1.0, -1.0, -1.0])


def mirror_axis_angle(theta):
    """Axis-angle of the x-mirrored rotation: ``(a_x, a_y, a_z) -> (a_x, -a_y, -a_z)``."""
    return ops.mul(theta, MIRROR_AA)
