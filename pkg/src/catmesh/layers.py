"""Functional building blocks shared by encoder and decoder.

Parameters live in a flat ``{name: array}`` dict. Layer functions take that
dict (with values either plain arrays or tape-watched tensors) plus a name
prefix, so the same code serves inference, training and gradient checks.
"""
from __future__ import annotations

import math
import zlib

import numpy as np

from .autodiff import ops

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled outside +-2 std."""
    out = rng.normal(scale=std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(scale=std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(specs: dict, seed: int, dtype=np.float64) -> dict:
    """Materialise ``{name: (shape, init)}``.

    Each parameter draws from its own generator keyed on ``(seed, crc32(name))``,
    so adding or removing unrelated parameters never changes a tensor's values.
    ``init`` is ``"normal"``, ``"zeros"``, ``"ones"`` or an explicit array.
    """
    out = {}
    for name, (shape, init) in specs.items():
        if isinstance(init, np.ndarray):
            val = init.reshape(shape).astype(dtype, copy=True)
        elif init == "zeros":
            val = np.zeros(shape, dtype=dtype)
        elif init == "ones":
            val = np.ones(shape, dtype=dtype)
        elif init == "normal":
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            val = trunc_normal(rng, shape).astype(dtype)
        else:
            raise ValueError(f"unknown init {init!r} for {name}")
        out[name] = val
    return out


# ---------------------------------------------------------------- specs

def linear_spec(name: str, d_in: int, d_out: int, zero: bool = False) -> dict:
    return {f"{name}.w": ((d_in, d_out), "zeros" if zero else "normal"), f"{name}.b": ((d_out,), "zeros")}


def ln_spec(name: str, C: int) -> dict:
    return {f"{name}.g": ((C,), "ones"), f"{name}.b": ((C,), "zeros")}


def mhsa_spec(name: str, C: int) -> dict:
    return {**linear_spec(f"{name}.qkv", C, 3 * C), **linear_spec(f"{name}.proj", C, C)}


def ffn_spec(name: str, C: int, hidden: int, d_out: int | None = None, zero_last: bool = False) -> dict:
    return {**linear_spec(f"{name}.fc1", C, hidden), **linear_spec(f"{name}.fc2", hidden, d_out or C, zero=zero_last)}


def block_spec(name: str, C: int, mlp_ratio: int = 4) -> dict:
    return {
        **ln_spec(f"{name}.ln1", C), **mhsa_spec(f"{name}.attn", C),
        **ln_spec(f"{name}.ln2", C), **ffn_spec(f"{name}.mlp", C, mlp_ratio * C),
    }


# ---------------------------------------------------------------- layers

def linear(x, P: dict, name: str):
    return ops.add(ops.matmul(x, P[f"{name}.w"]), P[f"{name}.b"])


def layer_norm(x, P: dict, name: str, eps: float = 1e-6):
    return ops.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"], eps)


def ffn(x, P: dict, name: str):
    return linear(ops.gelu(linear(x, P, f"{name}.fc1")), P, f"{name}.fc2")


def mhsa(x, P: dict, name: str, heads: int, attn_maps: list | None = None):
    """Multi-head self-attention over ``x [N, T, C]``."""
    N, T, C = x.shape
    if C % heads:
        raise ValueError(f"channel width {C} not divisible by {heads} heads")
    d = C // heads
    qkv = ops.reshape(linear(x, P, f"{name}.qkv"), (N, T, 3, heads, d))
    qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))  # 3, N, h, T, d
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    attn = ops.softmax(logits, axis=-1)
    if attn_maps is not None:
        attn_maps.append(attn.data)
    out = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (N, T, C))
    return linear(out, P, f"{name}.proj")


def transformer_block(x, P: dict, name: str, heads: int, attn_maps: list | None = None):
    """Pre-norm block: x + MHSA(LN(x)), then x + FFN(LN(x))."""
    x = ops.add(x, mhsa(layer_norm(x, P, f"{name}.ln1"), P, f"{name}.attn", heads, attn_maps))
    return ops.add(x, ffn(layer_norm(x, P, f"{name}.ln2"), P, f"{name}.mlp"))


def pointwise(x, P: dict, name: str):
    """1x1 convolution over ``x [N, C, h, w]``."""
    y = linear(ops.transpose(x, (0, 2, 3, 1)), P, name)
    return ops.transpose(y, (0, 3, 1, 2))
