"""Independent reference implementations shared by the unit and acceptance tests."""
import math

import numpy as np
from scipy.spatial.transform import Rotation

from catmesh import decoder as dec


def sample_loop(V, x, y):
    """Bilinear sample of ``V [C, h, w]`` at pixel ``(x, y)`` with border clamping, written out longhand."""
    _, h, w = V.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = min(int(math.floor(x)), max(w - 2, 0)), min(int(math.floor(y)), max(h - 2, 0))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    return ((1 - ax) * (1 - ay) * V[:, y0, x0] + ax * (1 - ay) * V[:, y0, x1]
            + (1 - ax) * ay * V[:, y1, x0] + ax * ay * V[:, y1, x1])


def deform_attn_loop(Q, V_levels, ref, P, name, heads, n_points):
    N, K, Cp = Q.shape
    L = len(V_levels)
    d = Cp // heads
    out = np.zeros((N, K, Cp))
    for n in range(N):
        values = [np.einsum("chw,co->ohw", V[n], P[f"{name}.value.w"]) + P[f"{name}.value.b"][:, None, None]
                  for V in V_levels]
        for q in range(K):
            off = (Q[n, q] @ P[f"{name}.off.w"] + P[f"{name}.off.b"]).reshape(heads, L, n_points, 2)
            logit = (Q[n, q] @ P[f"{name}.attw.w"] + P[f"{name}.attw.b"]).reshape(heads, L * n_points)
            for m in range(heads):
                A = np.exp(logit[m] - logit[m].max())
                A /= A.sum()
                acc = np.zeros(d)
                for l in range(L):
                    h, w = V_levels[l].shape[-2:]
                    px, py = ref[n, q, 0] * w - 0.5, ref[n, q, 1] * h - 0.5
                    for k in range(n_points):
                        s = sample_loop(values[l][m * d:(m + 1) * d], px + off[m, l, k, 0], py + off[m, l, k, 1])
                        acc += A[l * n_points + k] * s
                out[n, q, m * d:(m + 1) * d] = acc
    return out @ P[f"{name}.out.w"] + P[f"{name}.out.b"]


def random_deform_config(r):
    L = int(r.choice([1, 2, 3]))
    heads = int(r.choice([1, 2]))
    n_points = int(r.choice([1, 2, 4]))
    K = int(r.integers(1, 9))
    Cp = 4 * heads
    N = int(r.integers(1, 3))
    P = {k: r.normal(scale=0.5, size=s) for k, (s, _) in dec.deform_attn_spec("ca", Cp, heads, L, n_points).items()}
    P["ca.off.b"] = r.normal(scale=2.0, size=P["ca.off.b"].shape)  # some points land outside the map
    sizes = [(int(r.integers(2, 7)) * 2 ** l, int(r.integers(2, 7)) * 2 ** l) for l in range(L)]
    V = [r.normal(size=(N, Cp, h, w)) for h, w in sizes]
    return P, r.normal(size=(N, K, Cp)), V, r.uniform(0, 1, (N, K, 2)), heads, n_points


def horn_similarity(X, Y):
    """Independent closed form: Horn's unit-quaternion rotation, then least-squares scale and shift."""
    mx, my = X.mean(0), Y.mean(0)
    A, B = X - mx, Y - my
    S = A.T @ B
    (Sxx, Sxy, Sxz), (Syx, Syy, Syz), (Szx, Szy, Szz) = S
    N = np.array([
        [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
        [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
        [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
        [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
    ])
    w, v = np.linalg.eigh(N)
    q0, qx, qy, qz = v[:, -1]
    R = Rotation.from_quat([qx, qy, qz, q0]).as_matrix()
    s = np.sum(B * (A @ R.T)) / np.sum(A * A)
    return s, R, my - s * R @ mx


def random_similarity(r):
    return r.uniform(0.5, 2.0), Rotation.random(random_state=r).as_matrix(), r.normal(size=3)
