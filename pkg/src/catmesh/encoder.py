"""Global component-aware encoder: patch tokens + learnable body tokens through a ViT stack."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .autodiff import ops
from .body.template import N_BODY, N_SHAPE

N_BODY_OUT = N_BODY * 3 + N_SHAPE + 3  # 79
COMPONENT_ORDER = ("lhand", "rhand", "face")


@dataclass(frozen=True)
class EncoderConfig:
    H: int = 256
    W: int = 192
    M: int = 16
    C: int = 768
    B: int = 27
    depth: int = 12
    heads: int = 12
    mlp_ratio: int = 4
    head_hidden: int = 512

    def validate(self) -> None:
        if self.H % self.M or self.W % self.M:
            raise ValueError(f"patch size {self.M} must divide image {self.H}x{self.W}")
        if self.C % self.heads:
            raise ValueError(f"C={self.C} not divisible by heads={self.heads}")
        if self.B < 1:
            raise ValueError("need at least one body token")

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.M, self.W // self.M

    @property
    def n_patches(self) -> int:
        return (self.H // self.M) * (self.W // self.M)


def encoder_specs(cfg: EncoderConfig) -> dict:
    C = cfg.C
    specs = {
        **layers.linear_spec("enc.patch", cfg.M * cfg.M * 3, C),
        "enc.pos": ((cfg.n_patches, C), "normal"),
        "enc.body_tokens": ((cfg.B, C), "normal"),
    }
    for i in range(cfg.depth):
        specs.update(layers.block_spec(f"enc.blocks.{i}", C, cfg.mlp_ratio))
    specs.update(layers.ln_spec("enc.norm", C))
    specs.update(layers.ffn_spec("body_head", cfg.B * C, cfg.head_hidden, N_BODY_OUT, zero_last=True))
    for comp in COMPONENT_ORDER:
        specs.update(layers.ffn_spec(f"box_head.{comp}", C, C, 5, zero_last=True))
    return specs


def patchify(images: np.ndarray, M: int) -> np.ndarray:
    """``[N, H, W, 3]`` -> ``[N, HW/M^2, M*M*3]``, row-major patch order (top-left first)."""
    images = np.asarray(images)
    N, H, W, ch = images.shape
    p = images.reshape(N, H // M, M, W // M, M, ch).transpose(0, 1, 3, 2, 4, 5)
    return p.reshape(N, (H // M) * (W // M), M * M * ch)


def patchify_embed(images, P: dict, cfg: EncoderConfig, with_pos: bool = True):
    images = np.asarray(images)
    if images.shape[1:] != (cfg.H, cfg.W, 3):
        raise ValueError(f"expected images [N, {cfg.H}, {cfg.W}, 3], got {images.shape}")
    tokens = layers.linear(patchify(images, cfg.M), P, "enc.patch")
    return ops.add(tokens, P["enc.pos"]) if with_pos else tokens


def encoder_forward(T_f, P: dict, cfg: EncoderConfig, attn_maps: list | None = None):
    """Run ``[T_f ; T_b]`` through the blocks; return ``(T_f', T_b')``."""
    N, T, C = T_f.shape
    body = ops.add(np.zeros((N, cfg.B, C), dtype=T_f.dtype), P["enc.body_tokens"])
    x = ops.concat([T_f, body], axis=1)
    for i in range(cfg.depth):
        x = layers.transformer_block(x, P, f"enc.blocks.{i}", cfg.heads, attn_maps)
    x = layers.layer_norm(x, P, "enc.norm")
    return x[:, :T], x[:, T:]


def regress_body(T_b, P: dict, cfg: EncoderConfig) -> dict:
    N = T_b.shape[0]
    out = layers.ffn(ops.reshape(T_b, (N, cfg.B * cfg.C)), P, "body_head")
    n_rot = N_BODY * 3
    return {
        "theta_body": ops.reshape(out[:, :n_rot], (N, N_BODY, 3)),
        "beta": out[:, n_rot:n_rot + N_SHAPE],
        "t": out[:, n_rot + N_SHAPE:],
    }


def token_centres(cfg: EncoderConfig) -> np.ndarray:
    """Normalised ``(x, y)`` centre of every patch, row-major."""
    gh, gw = cfg.grid
    xs = (np.arange(gw) + 0.5) / gw
    ys = (np.arange(gh) + 0.5) / gh
    return np.stack([np.tile(xs, gh), np.repeat(ys, gw)], axis=-1)


def regress_component_boxes(T_f, P: dict, cfg: EncoderConfig):
    """``[N, 3, 4]`` boxes ``(cx, cy, w, h)`` in [0, 1] for lhand, rhand, face.

    Per token, an FFN predicts a vote logit, a centre offset (at most half a patch)
    and a size; the box is the softmax-weighted average of the token votes.
    """
    gh, gw = cfg.grid
    centres = token_centres(cfg).astype(T_f.dtype)
    half = np.array([0.5 / gw, 0.5 / gh], dtype=T_f.dtype)
    boxes = []
    for c in COMPONENT_ORDER:
        out = layers.ffn(T_f, P, f"box_head.{c}")                       # N, T, 5
        w = ops.softmax(out[..., 0], axis=-1)                            # N, T
        centre = ops.add(ops.mul(ops.tanh(out[..., 1:3]), half), centres)
        size = ops.sigmoid(out[..., 3:5])
        votes = ops.concat([centre, size], axis=-1)                      # N, T, 4
        boxes.append(ops.sum(ops.mul(votes, ops.reshape(w, w.shape + (1,))), axis=1))
    # the weighted mean can round one ulp past 1
    return ops.clip(ops.stack(boxes, axis=1), 0.0, 1.0)
