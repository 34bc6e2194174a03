"""Binary checkpoints.

Layout (little-endian)::

    8 bytes   magic b"CATCKPT1"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON: config text, step, RNG state, optimizer scalars,
              free-form ``meta``, and a tensor table of
              ``{name, dtype, shape, offset, nbytes}``
    payload   raw tensor bytes, offsets relative to the payload start
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..autodiff.optim import AdamState

MAGIC = b"CATCKPT1"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    step: int
    weights: dict
    adam: AdamState | None = None
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def _dtype_code(a: np.ndarray) -> str:
    for code, dt in _DTYPES.items():
        if a.dtype == dt.newbyteorder("=") or a.dtype == dt:
            return code
    raise CheckpointError(f"unsupported dtype {a.dtype}")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = {f"model/{k}": v for k, v in ckpt.weights.items()}
    adam = None
    if ckpt.adam is not None:
        a = ckpt.adam
        adam = {"beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "lr": a.lr, "step": a.step}
        tensors.update({f"adam_m/{k}": v for k, v in a.m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in a.v.items()})
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": ckpt.config_text, "step": ckpt.step, "rng_state": ckpt.rng_state,
                         "adam": adam, "meta": ckpt.meta, "tensors": table}).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen].decode())
    payload = memoryview(blob)[start + hlen:]
    tensors = {}
    for t in header["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        arr = np.frombuffer(payload[t["offset"]:end], dtype=_DTYPES[t["dtype"]]).reshape(t["shape"])
        tensors[t["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    weights = {k[6:]: v for k, v in tensors.items() if k.startswith("model/")}
    adam = None
    if header["adam"] is not None:
        adam = AdamState(**header["adam"])
        adam.m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")}
        adam.v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")}
    return Checkpoint(config_text=header["config"], step=header["step"], weights=weights, adam=adam,
                      rng_state=header["rng_state"], meta=header["meta"])


def shape_diff(expected: dict, weights: dict) -> list[str]:
    """Human-readable differences between expected ``{name: shape}`` and loaded weights."""
    out = []
    for name in sorted(expected.keys() - weights.keys()):
        out.append(f"missing {name} {tuple(expected[name])}")
    for name in sorted(weights.keys() - expected.keys()):
        out.append(f"unexpected {name} {weights[name].shape}")
    for name in sorted(expected.keys() & weights.keys()):
        if tuple(expected[name]) != weights[name].shape:
            out.append(f"{name}: expected {tuple(expected[name])}, got {weights[name].shape}")
    return out


def check_shapes(expected: dict, weights: dict) -> None:
    diff = shape_diff(expected, weights)
    if diff:
        raise CheckpointError("checkpoint does not match the model: " + "; ".join(diff))
