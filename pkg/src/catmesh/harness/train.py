"""Mini-batch Adam training over synthetic scenes."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ..autodiff import Tape
from ..autodiff.optim import AdamState, adam_step, cosine_lr
from ..body.template import BodyTemplate, make_toy_template
from ..losses import CameraModel, LossWeights, loss_total
from ..model import CatModel, forward
from .checkpoint import Checkpoint, check_shapes, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .synth import Dataset, augmented_batch, make_dataset

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when the loss stops being finite; ``last_good`` points at the saved weights."""

    def __init__(self, msg: str, last_good: str | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class Setup:
    template: BodyTemplate
    cam: CameraModel
    train_set: Dataset


@dataclass
class TrainResult:
    model: CatModel
    adam: AdamState
    step: int
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    rng_state: dict | None = None

    def checkpoint(self, cfg: RunConfig) -> Checkpoint:
        return Checkpoint(config_text=cfg.to_text(), step=self.step, weights=self.model.weights,
                          adam=self.adam, rng_state=self.rng_state)


def make_setup(cfg: RunConfig) -> Setup:
    e = cfg.encoder
    template = make_toy_template()
    cam = CameraModel.for_image(e.H, e.W)
    data = make_dataset(template, cam, e.H, e.W, cfg.data.n_train, cfg.data.seed, cfg.data.pixel_noise)
    return Setup(template, cam, data)


def effective_weights(cfg: RunConfig) -> LossWeights:
    """The box term only trains the crop boxes, so it is dropped when the decoder is off."""
    return cfg.loss if cfg.decoder.enabled else replace(cfg.loss, bbox=0.0)


def learning_rate(cfg: RunConfig, step: int) -> float:
    """Cosine annealing that reaches exactly zero on the last scheduled step."""
    total = cfg.optim.schedule_length or cfg.optim.total_steps(cfg.data.n_train)
    if total <= 1:
        return cfg.optim.lr
    return cosine_lr(min(step, total - 1), total - 1, cfg.optim.lr)


def train_step(model: CatModel, adam: AdamState, images, gt, setup: Setup, weights: LossWeights, lr: float):
    tape = Tape()
    P = tape.watch_all(model.weights)
    pred = forward(P, images.astype(model.dtype, copy=False), model.cfg)
    total, terms = loss_total(pred, gt, setup.cam, weights, setup.template)
    value = float(total.data)
    row = {"loss": value, **{k: float(v.data) for k, v in terms.items()}, "lr": lr}
    if not math.isfinite(value):
        return row, False
    grads = tape.backward(total)
    adam_step(model.weights, {k: grads[P[k]] for k in P}, adam, lr=lr)
    return row, True


def train(cfg: RunConfig, resume: str | Checkpoint | None = None, out_dir: str | None = None,
          setup: Setup | None = None, max_steps: int | None = None, callback=None) -> TrainResult:
    """Train from scratch or from ``resume``; writes checkpoints under ``out_dir`` if given.

    ``max_steps`` stops early (used to create a mid-run checkpoint); the learning-rate
    schedule still follows the configured length.
    """
    cfg.validate()
    setup = setup or make_setup(cfg)
    total = cfg.optim.total_steps(cfg.data.n_train)
    stop = total if max_steps is None else min(total, max_steps)
    o = cfg.optim
    rng = np.random.default_rng(cfg.run.seed)
    if resume is not None:
        ckpt = load_checkpoint(resume) if isinstance(resume, (str, os.PathLike)) else resume
        model = CatModel(cfg.model, {k: v.copy() for k, v in ckpt.weights.items()})
        check_shapes(model.expected_shapes(), model.weights)
        adam = AdamState(beta1=ckpt.adam.beta1, beta2=ckpt.adam.beta2, eps=ckpt.adam.eps, lr=ckpt.adam.lr,
                         step=ckpt.adam.step, m={k: v.copy() for k, v in ckpt.adam.m.items()},
                         v={k: v.copy() for k, v in ckpt.adam.v.items()})
        rng.bit_generator.state = ckpt.rng_state
        start = ckpt.step
    else:
        model = CatModel.init(cfg.model, seed=cfg.run.seed, dtype=cfg.dtype)
        adam = AdamState.for_params(model.weights, beta1=o.beta1, beta2=o.beta2, eps=o.eps, lr=o.lr)
        start = 0
    weights = effective_weights(cfg)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    result = TrainResult(model=model, adam=adam, step=start)
    n, bs = cfg.data.n_train, min(o.batch_size, cfg.data.n_train)

    for step in range(start, stop):
        idx = np.sort(rng.permutation(n)[:bs])
        if cfg.data.augment:
            e = cfg.encoder
            images, gt = augmented_batch(rng, setup.template, setup.cam, setup.train_set, idx, cfg.data, e.H, e.W)
        else:
            images, gt = setup.train_set.batch(idx)
        lr = learning_rate(cfg, step)
        good = {k: v.copy() for k, v in model.weights.items()} if out_dir else None
        row, ok = train_step(model, adam, images, gt, setup, weights, lr)
        row["step"] = step
        result.log.append(row)
        if not ok:
            path = None
            if out_dir:
                path = os.path.join(out_dir, "last_good.ckpt")
                save_checkpoint(Checkpoint(cfg.to_text(), step, good, None, rng.bit_generator.state,
                                           {"reason": "non-finite loss"}), path)
            raise NumericalError(f"non-finite loss at step {step}: {row}", path)
        if step % cfg.run.log_every == 0:
            log.info("step %d loss %.6g lr %.3g", step, row["loss"], lr)
        result.step = step + 1
        result.rng_state = rng.bit_generator.state
        if callback is not None:
            callback(step, row, model)
        if out_dir and cfg.run.ckpt_every and result.step % cfg.run.ckpt_every == 0:
            path = os.path.join(out_dir, f"step_{result.step:06d}.ckpt")
            save_checkpoint(result.checkpoint(cfg), path)
            result.checkpoints.append(path)

    result.rng_state = rng.bit_generator.state
    if out_dir:
        path = os.path.join(out_dir, "final.ckpt")
        save_checkpoint(result.checkpoint(cfg), path)
        result.checkpoints.append(path)
    return result


def config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    return parse_config(ckpt.config_text, env={})
