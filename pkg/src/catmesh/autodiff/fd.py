"""Central finite differences against tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tape import Tape, Tensor


def numerical_grad(fn: Callable, inputs: Sequence[np.ndarray], which: int, coords, h: float = 1e-3) -> np.ndarray:
    consts = [Tensor(np.array(x, dtype=np.float64)) for x in inputs]
    x = consts[which].data
    out = np.zeros(len(coords))
    for n, c in enumerate(coords):
        old = x[c]
        x[c] = old + h
        fp = float(fn(*consts).data)
        x[c] = old - h
        fm = float(fn(*consts).data)
        x[c] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def grad_error(fn: Callable, inputs: Sequence[np.ndarray], h: float = 1e-3, max_coords: int | None = None,
               rng: np.random.Generator | None = None, wrt: Sequence[int] | None = None) -> float:
    """Largest relative mismatch between tape and central-difference gradients.

    Per input, the error is ``max|analytic - numeric| / max(max|numeric|,
    max|analytic|, 1e-8)`` over the checked coordinates; the maximum over
    inputs is returned. ``max_coords`` subsamples coordinates of big inputs.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    watched = [tape.watch(x) for x in inputs]
    out = fn(*watched)
    grads = tape.backward(out)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for i in (range(len(inputs)) if wrt is None else wrt):
        analytic = grads[watched[i]]
        all_coords = list(np.ndindex(inputs[i].shape))
        if max_coords is not None and len(all_coords) > max_coords:
            pick = rng.choice(len(all_coords), size=max_coords, replace=False)
            coords = [all_coords[k] for k in sorted(pick)]
        else:
            coords = all_coords
        numeric = numerical_grad(fn, inputs, i, coords, h)
        a = np.array([analytic[c] for c in coords])
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(a).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(a - numeric).max(initial=0.0) / scale))
    return worst
