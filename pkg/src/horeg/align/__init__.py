"""Closed-form and iterative alignment."""
from .icp import POINT_TO_PLANE, POINT_TO_POINT, IcpConfig, IcpTarget, icp, sequential_icp
from .meshdist import (MeshQuery, SurfaceSample, SurfaceSamples, closest_point_on_triangles,
                       mesh_distances, point_mesh_distance)
from .meshfit import MeshFitConfig, fit_mesh_pose, sample_oriented, two_mesh_objective
from .pnp import PnPResult, dlt, pnp, reprojection_rmse
from .procrustes import umeyama

__all__ = [
    "IcpConfig", "IcpTarget", "MeshFitConfig", "MeshQuery", "PnPResult", "POINT_TO_PLANE",
    "POINT_TO_POINT", "SurfaceSample", "SurfaceSamples", "closest_point_on_triangles", "dlt",
    "fit_mesh_pose", "icp", "mesh_distances", "pnp", "point_mesh_distance", "reprojection_rmse",
    "sample_oriented", "sequential_icp", "two_mesh_objective", "umeyama",
]
