"""Mesh export for qualitative inspection."""
from __future__ import annotations

import numpy as np

from ..body.io import export_obj
from ..body.smplx import MeshOutput, SmplxParams, smplx_forward
from ..body.template import BodyTemplate


def export_mesh(mesh: MeshOutput, faces: np.ndarray, path) -> None:
    """Write one (unbatched) mesh as an ASCII OBJ."""
    verts = np.asarray(getattr(mesh.vertices, "data", mesh.vertices))
    if verts.ndim != 2:
        raise ValueError(f"export_mesh expects a single mesh [V, 3], got {verts.shape}")
    export_obj(verts, faces, path)


def export_params(template: BodyTemplate, params: SmplxParams, path) -> None:
    export_mesh(smplx_forward(template, params), template.faces, path)
