from .io import export_obj, load_template, read_obj, save_template
from .smplx import (
    N_PARAMS,
    PARAM_LAYOUT,
    MeshOutput,
    SmplxParams,
    flip_params,
    forward_kinematics,
    full_pose,
    lbs,
    rodrigues,
    shape_blend,
    smplx_forward,
)
from .template import (
    COMPONENT_JOINTS,
    COMPONENTS,
    JOINT_NAMES,
    N_JOINTS,
    PARENTS,
    BodyTemplate,
    TemplateConfig,
    make_toy_template,
)

__all__ = [
    "BodyTemplate", "TemplateConfig", "make_toy_template", "SmplxParams", "MeshOutput",
    "rodrigues", "shape_blend", "forward_kinematics", "lbs", "smplx_forward", "full_pose",
    "flip_params", "save_template", "load_template", "export_obj", "read_obj", "N_PARAMS",
    "PARAM_LAYOUT", "JOINT_NAMES", "N_JOINTS", "PARENTS", "COMPONENTS", "COMPONENT_JOINTS",
]
