"""CatModel: weights + config, and the full image -> SMPL-X parameter forward."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import decoder as dec
from . import encoder as enc
from . import layers
from .autodiff import Tape, ops
from .body.smplx import SmplxParams
from .body.template import N_EXPR, N_HAND

N_FALLBACK = 2 * N_HAND * 3 + 3 + N_EXPR  # 103


@dataclass(frozen=True)
class ModelConfig:
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    decoder: dec.DecoderConfig = field(default_factory=dec.DecoderConfig)

    def validate(self) -> None:
        self.encoder.validate()
        self.decoder.validate(self.encoder.C)

    @property
    def n_component_tokens(self) -> int:
        return 2 * self.decoder.K_hand + self.decoder.K_face


@dataclass
class Prediction:
    params: SmplxParams
    boxes: object          # [N, 3, 4] lhand, rhand, face
    trace: dict = field(default_factory=dict)


def model_specs(cfg: ModelConfig) -> dict:
    e, d = cfg.encoder, cfg.decoder
    specs = enc.encoder_specs(e)
    if d.enabled:
        specs.update(dec.decoder_specs(e.C, d))
    else:
        specs.update(layers.ffn_spec("fallback_head", e.B * e.C, e.head_hidden, N_FALLBACK, zero_last=True))
    return specs


def forward(P: dict, images, cfg: ModelConfig, trace: dict | None = None) -> Prediction:
    """Images ``[N, H, W, 3]`` in [-1, 1] -> predicted parameters and boxes."""
    e, d = cfg.encoder, cfg.decoder
    images = np.asarray(images, dtype=P["enc.pos"].dtype)
    attn = trace.setdefault("encoder_attn", []) if trace is not None else None
    T_f = enc.patchify_embed(images, P, e)
    T_f2, T_b2 = enc.encoder_forward(T_f, P, e, attn)
    body = enc.regress_body(T_b2, P, e)
    boxes = enc.regress_component_boxes(T_f2, P, e)
    N = images.shape[0]

    if d.enabled:
        fmap = dec.tokens_to_map(T_f2, e.grid)
        maps = dec.upsample_multiscale(fmap, P, d.scales)
        if trace is not None:
            trace["map_shapes"] = [m.shape for m in maps]
        lcrops = dec.crop_levels(fmap, maps, boxes[:, 0], d, mirror=True)
        rcrops = dec.crop_levels(fmap, maps, boxes[:, 1], d)
        fcrops = dec.crop_levels(fmap, maps, boxes[:, 2], d)
        # both hands go through the shared pathway in one batch
        hcrops = [ops.concat([l, r], axis=0) for l, r in zip(lcrops, rcrops)]
        htok = dec.component_from_crops(hcrops, P, "hand", d, trace)
        hands = dec.regress_hand(htok, P)
        lhand = dec.mirror_axis_angle(hands[:N])
        rhand = hands[N:]
        ftok = dec.component_from_crops(fcrops, P, "face", d, trace)
        jaw, phi = dec.regress_face(ftok, P)
        if trace is not None:
            trace["component_tokens"] = htok.shape[1] * 2 + ftok.shape[1]
    else:
        out = layers.ffn(ops.reshape(T_b2, (N, e.B * e.C)), P, "fallback_head")
        n = N_HAND * 3
        lhand = ops.reshape(out[:, :n], (N, N_HAND, 3))
        rhand = ops.reshape(out[:, n:2 * n], (N, N_HAND, 3))
        jaw = out[:, 2 * n:2 * n + 3]
        phi = out[:, 2 * n + 3:]

    params = SmplxParams(theta_body=body["theta_body"], beta=body["beta"], t=body["t"],
                         theta_lhand=lhand, theta_rhand=rhand, theta_jaw=jaw, phi=phi)
    return Prediction(params=params, boxes=boxes, trace=trace if trace is not None else {})


class CatModel:
    """All learnable weights (a flat name -> array dict) plus the architecture config."""

    def __init__(self, cfg: ModelConfig, weights: dict):
        self.cfg = cfg
        self.weights = weights

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> "CatModel":
        cfg.validate()
        return cls(cfg, layers.init_params(model_specs(cfg), seed, dtype))

    @property
    def dtype(self):
        return self.weights["enc.pos"].dtype

    def n_parameters(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def expected_shapes(self) -> dict:
        return {k: tuple(s) for k, (s, _) in model_specs(self.cfg).items()}

    def __call__(self, images, tape: Tape | None = None, trace: dict | None = None) -> Prediction:
        P = tape.watch_all(self.weights) if tape is not None else self.weights
        return forward(P, images, self.cfg, trace)
