"""Template binary format and Wavefront OBJ export.

Template file layout, all little-endian::

    8 bytes   magic b"CATBODY1"
    uint32    V, J, F
    float64   vertices        [V, 3]
    uint32    faces           [F, 3]
    float64   shape_dirs      [V, 3, 10]
    float64   expr_dirs       [V, 3, 10]
    float64   joint_regressor [J, V]
    float64   skin_weights    [V, J]
    int32     parents         [J]        (root = -1)
    4 x (uint32 n, uint32 indices[n])    component masks: body, lhand, rhand, face
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .template import COMPONENTS, N_EXPR, N_SHAPE, BodyTemplate

TEMPLATE_MAGIC = b"CATBODY1"


def save_template(template: BodyTemplate, path) -> None:
    V, J, F = template.n_vertices, template.n_joints, len(template.faces)
    with open(path, "wb") as fh:
        fh.write(TEMPLATE_MAGIC)
        fh.write(struct.pack("<III", V, J, F))
        fh.write(np.ascontiguousarray(template.vertices, "<f8").tobytes())
        fh.write(np.ascontiguousarray(template.faces, "<u4").tobytes())
        fh.write(np.ascontiguousarray(template.shape_dirs, "<f8").tobytes())
        fh.write(np.ascontiguousarray(template.expr_dirs, "<f8").tobytes())
        fh.write(np.ascontiguousarray(template.joint_regressor, "<f8").tobytes())
        fh.write(np.ascontiguousarray(template.skin_weights, "<f8").tobytes())
        fh.write(np.ascontiguousarray(template.parents, "<i4").tobytes())
        for c in COMPONENTS:
            idx = np.ascontiguousarray(template.component_masks[c], "<u4")
            fh.write(struct.pack("<I", len(idx)))
            fh.write(idx.tobytes())


def load_template(path) -> BodyTemplate:
    buf = Path(path).read_bytes()
    if buf[:8] != TEMPLATE_MAGIC:
        raise ValueError(f"{path}: not a CATBODY1 template file")
    V, J, F = struct.unpack_from("<III", buf, 8)
    off = 20

    def take(dtype, shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(shape)
        off += n * np.dtype(dtype).itemsize
        return arr

    vertices = take("<f8", (V, 3)).astype(np.float64)
    faces = take("<u4", (F, 3)).astype(np.int64)
    shape_dirs = take("<f8", (V, 3, N_SHAPE)).astype(np.float64)
    expr_dirs = take("<f8", (V, 3, N_EXPR)).astype(np.float64)
    reg = take("<f8", (J, V)).astype(np.float64)
    skin = take("<f8", (V, J)).astype(np.float64)
    parents = take("<i4", (J,)).astype(np.int64)
    masks = {}
    for c in COMPONENTS:
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        masks[c] = take("<u4", (n,)).astype(np.int64)
    tpl = BodyTemplate(vertices=vertices, faces=faces, shape_dirs=shape_dirs, expr_dirs=expr_dirs,
                       joint_regressor=reg, skin_weights=skin, parents=parents, component_masks=masks)
    tpl.validate()
    return tpl


def export_obj(vertices, faces, path) -> None:
    """Write an ASCII OBJ (1-based face indices)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lines = [f"# catmesh export: {len(vertices)} vertices, {len(faces)} faces"]
    lines += [f"v {x:.8f} {y:.8f} {z:.8f}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts), np.array(faces, dtype=np.int64)
