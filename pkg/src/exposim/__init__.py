"""Desk-scale dissection-assistance workbench.

Library layout:

- :mod:`exposim.geometry` - tet/surface meshes, anchors, rays, phantoms
- :mod:`exposim.xpbd` - quasi-static solver and deformation Jacobian
- :mod:`exposim.exposure` - ring features, exposure metrics, observation Jacobian
- :mod:`exposim.perception` - synthetic camera, visibility, clouds, registration
- :mod:`exposim.aps` - assistance-position selection
- :mod:`exposim.servo` - PD visual-servoing loop
- :mod:`exposim.harness` - scenarios, runs, reports, batching
- :mod:`exposim.bridge` - websocket operator session
"""

from . import errors
from .exposure import DissectionSegment, FeatureSet, init_observation, observe
from .geometry import (
    MaterialAnchor,
    ParticleState,
    SurfaceMesh,
    TetMesh,
    bind_material_point,
    eval_anchor,
    gen_wedge_phantom,
    load_tet_mesh,
    ray_triangle_intersect,
    save_tet_mesh,
)
from .harness import RunReport, Scenario, compare_aps, run_assist_request, run_batch
from .perception import CameraModel, PointCloud, VisibilityMask, chamfer
from .xpbd import ConstraintSet, SimConfig, SimState, default_constraints, init_sim

__all__ = [
    "errors",
    "DissectionSegment",
    "FeatureSet",
    "init_observation",
    "observe",
    "MaterialAnchor",
    "ParticleState",
    "SurfaceMesh",
    "TetMesh",
    "bind_material_point",
    "eval_anchor",
    "gen_wedge_phantom",
    "load_tet_mesh",
    "ray_triangle_intersect",
    "save_tet_mesh",
    "RunReport",
    "Scenario",
    "compare_aps",
    "run_assist_request",
    "run_batch",
    "CameraModel",
    "PointCloud",
    "VisibilityMask",
    "chamfer",
    "ConstraintSet",
    "SimConfig",
    "SimState",
    "default_constraints",
    "init_sim",
]

__version__ = "0.1.0"
