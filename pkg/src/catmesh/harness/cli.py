"""``catmesh`` command line.

Exit codes: 0 success, 1 invalid input (config, checkpoint, arguments),
2 numerical failure (non-finite loss, failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from ..body.smplx import SmplxParams
from ..body.template import make_toy_template
from ..losses import CameraModel
from ..model import CatModel
from .checkpoint import CheckpointError, check_shapes, load_checkpoint
from .config import ConfigError, load_config, preset, with_env
from .evaluate import evaluate, predict
from .export import export_params
from .gradcheck import REGISTRY, gradcheck
from .synth import make_dataset
from .train import NumericalError, config_from_checkpoint, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
log = logging.getLogger("catmesh")


def _model_from_ckpt(path):
    ckpt = load_checkpoint(path)
    cfg = config_from_checkpoint(ckpt)
    model = CatModel(cfg.model, ckpt.weights)
    check_shapes(model.expected_shapes(), model.weights)
    return cfg, model


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else with_env(preset(args.preset)).validate()
    out = args.out or cfg.run.out_dir
    result = train(cfg, resume=args.resume, out_dir=out)
    last = result.log[-1] if result.log else {}
    print(f"trained to step {result.step}; final loss {last.get('loss', float('nan')):.6g}; "
          f"checkpoint {result.checkpoints[-1]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model = _model_from_ckpt(args.ckpt)
    e = cfg.encoder
    template = make_toy_template()
    cam = CameraModel.for_image(e.H, e.W)
    data = make_dataset(template, cam, e.H, e.W, args.n, args.seed)
    report = evaluate(model, template, cam, data, oracle=args.oracle)
    text = report.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text)
    bad = report.violations()
    if bad or not np.isfinite(report.errors["all"]["mpvpe"]):
        print("metric invariants violated: " + "; ".join(bad), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.ops.split(",") if args.ops else None
    try:
        report = gradcheck(names, seed=args.seed)
    except KeyError as e:
        print(f"{e.args[0]}; available: {', '.join(REGISTRY)}", file=sys.stderr)
        return EXIT_INVALID
    print(report.format())
    return EXIT_OK if report.ok else EXIT_NUMERIC


def _write_ppm(path, image: np.ndarray) -> None:
    rgb = np.clip((image + 1.0) * 127.5 + 0.5, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6 {rgb.shape[1]} {rgb.shape[0]} 255\n".encode())
        fh.write(rgb.tobytes())


def cmd_synth(args) -> int:
    cfg = load_config(args.config) if args.config else with_env(preset("desk")).validate()
    e = cfg.encoder
    template = make_toy_template()
    cam = CameraModel.for_image(e.H, e.W)
    data = make_dataset(template, cam, e.H, e.W, args.n, args.seed)
    os.makedirs(args.out, exist_ok=True)
    g = data.gt
    np.savez(os.path.join(args.out, "dataset.npz"), images=data.images, params=g.params.to_vector(),
             kpt3d=g.kpt3d, kpt2d=g.kpt2d, visible=g.visible, boxes=g.boxes, mesh=g.mesh, ids=data.ids)
    for i in range(len(data)):
        _write_ppm(os.path.join(args.out, f"sample_{i:05d}.ppm"), data.images[i])
    print(f"wrote {len(data)} samples to {args.out}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg, model = _model_from_ckpt(args.ckpt)
    e = cfg.encoder
    template = make_toy_template()
    cam = CameraModel.for_image(e.H, e.W)
    data = make_dataset(template, cam, e.H, e.W, args.sample + 1, args.seed)
    if args.gt:
        params = data.gt.index(args.sample).params
    else:
        pred = predict(model, data.images[args.sample:args.sample + 1])
        params = SmplxParams(**{k: v[0] for k, v in vars(pred).items()})
    export_params(template, params, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="catmesh", description="Toy whole-body mesh recovery.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="flat 'section.key = value' config file")
    t.add_argument("--preset", default="desk", help="preset used when --config is absent")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--out", help="output directory (default: run.out_dir)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on fresh synthetic scenes")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--n", type=int, default=64)
    e.add_argument("--seed", type=int, default=1000)
    e.add_argument("--out", help="write the JSON report here")
    e.add_argument("--oracle", action="store_true", help="score ground truth instead of predictions")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--ops", help="comma-separated subset (default: all)")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("synth", help="write synthetic samples")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="config whose image size to use (default: desk preset)")
    s.set_defaults(fn=cmd_synth)

    x = sub.add_parser("export", help="export a predicted mesh as OBJ")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--sample", type=int, required=True)
    x.add_argument("--seed", type=int, default=1000, help="synthetic set the sample id refers to")
    x.add_argument("--out", required=True)
    x.add_argument("--gt", action="store_true", help="export the ground-truth mesh instead")
    x.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "n", 1) is not None and getattr(args, "n", 1) < 1:
        print("--n must be positive", file=sys.stderr)
        return EXIT_INVALID
    if getattr(args, "sample", 0) < 0:
        print("--sample must be non-negative", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.fn(args)
    except NumericalError as e:
        print(f"numerical failure: {e}" + (f" (last good weights: {e.last_good})" if e.last_good else ""),
              file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
