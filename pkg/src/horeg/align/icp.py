"""Trimmed rigid ICP of a depth point cloud against a triangle mesh."""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from ..errors import DataError, HoregError, NoCorrespondences
from ..geom import (ColoredPointCloud, PoseSequence, RigidTransform, TriangleMesh,
                    sample_surface, so3_exp)
from .meshdist import MeshQuery
from .procrustes import umeyama

POINT_TO_POINT = "point-to-point"
POINT_TO_PLANE = "point-to-plane"


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    correspondence_radius: float = 0.05
    trim_fraction: float = 0.2
    convergence_eps: float = 1e-5
    mode: str = POINT_TO_PLANE
    min_samples: int = 20000
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.trim_fraction < 1:
            raise DataError("trim_fraction must lie in [0, 1)")
        if self.correspondence_radius <= 0:
            raise DataError("correspondence_radius must be positive")
        if self.mode not in (POINT_TO_POINT, POINT_TO_PLANE):
            raise DataError(f"unknown ICP mode {self.mode!r}")


class IcpTarget:
    """Mesh prepared for repeated ICP calls.

    Nearest dense surface samples give a candidate face per query; the exact
    closest point is then found with that face as the search bound.
    """

    def __init__(self, mesh: TriangleMesh, n_samples: int, seed: int = 0):
        self.mesh = mesh
        self.query = MeshQuery(mesh)
        pts, face, _ = sample_surface(mesh, n_samples, seed, return_index=True)
        # vertices guarantee every face corner region has a hint
        vf = np.zeros(len(mesh.vertices), np.int64)
        for k in range(3):
            vf[mesh.faces[:, k]] = np.arange(mesh.n_faces)
        self.sample_points = np.concatenate([pts, mesh.vertices])
        self.sample_faces = np.concatenate([face, vf])
        self.tree = cKDTree(self.sample_points)
        self.n_samples = n_samples

    def correspond(self, points):
        _, idx = self.tree.query(points)
        cp = self.query.closest(points, hint_faces=self.sample_faces[idx])
        return cp.points, self.query.face_normals[cp.faces], cp.sq_dist


def _trimmed(sq_dist, radius, trim):
    n = len(sq_dist)
    k = max(1, int(np.ceil((1.0 - trim) * n)))
    trunc = np.minimum(sq_dist, radius**2)
    keep = np.argsort(trunc, kind="stable")[:k]
    return float(np.sqrt(trunc[keep].mean())), keep


def icp(source: ColoredPointCloud, target_mesh, init: RigidTransform,
        cfg: IcpConfig = IcpConfig(), history: Optional[list] = None):
    """Register ``source`` (camera frame) to ``target_mesh`` (world frame).

    Returns the camera_from_world pose and the trimmed RMS residual in metres.
    The residual is the RMS over the best ``1 - trim_fraction`` share of
    exact point-to-surface distances truncated at the correspondence radius;
    steps that would increase it are rejected, which ends the iteration.
    """
    pts = np.asarray(source.positions)
    if len(pts) == 0:
        raise NoCorrespondences("empty source cloud")
    target = target_mesh if isinstance(target_mesh, IcpTarget) else \
        IcpTarget(target_mesh, max(cfg.min_samples, 8 * len(pts)), cfg.seed)
    r2 = cfg.correspondence_radius

    W = init.inverse()   # world_from_camera
    y = W.apply(pts)
    p, n, d2 = target.correspond(y)
    if not np.any(d2 < r2**2):
        raise NoCorrespondences("no source point lies within the correspondence radius")
    res, keep = _trimmed(d2, r2, cfg.trim_fraction)
    if history is not None:
        history.append(res)

    for _ in range(cfg.max_iterations):
        sel = keep[d2[keep] < r2**2]
        if len(sel) < 6:
            break
        try:
            if cfg.mode == POINT_TO_POINT:
                W_new = umeyama(pts[sel], p[sel], with_scale=False).rigid()
            else:
                ys, ps, ns = y[sel], p[sel], n[sel]
                A = np.c_[np.cross(ys, ns), ns]
                b = -np.einsum("ij,ij->i", ys - ps, ns)
                x, *_ = np.linalg.lstsq(A, b, rcond=None)
                W_new = RigidTransform(so3_exp(x[:3]), x[3:]).compose(W)
        except HoregError:
            break
        y_new = W_new.apply(pts)
        p_new, n_new, d2_new = target.correspond(y_new)
        res_new, keep_new = _trimmed(d2_new, r2, cfg.trim_fraction)
        if res_new > res:
            break
        gain = res - res_new
        W, y, p, n, d2, res, keep = W_new, y_new, p_new, n_new, d2_new, res_new, keep_new
        if history is not None:
            history.append(res)
        if gain < cfg.convergence_eps:
            break
    return W.inverse(), res


def sequential_icp(frames: Sequence[ColoredPointCloud], mesh: TriangleMesh, first_init: RigidTransform,
                   cfg: IcpConfig = IcpConfig()) -> PoseSequence:
    """Chain ICP through a sequence, each frame initialised from the last valid result.

    Frames that fail are marked invalid and carry the last valid pose.
    """
    if len(frames) == 0:
        raise DataError("sequential_icp needs at least one frame")
    n_src = max(len(f) for f in frames)
    target = IcpTarget(mesh, max(cfg.min_samples, 8 * n_src), cfg.seed)
    poses, valid, resid = [], [], []
    last = first_init
    for frame in frames:
        try:
            pose, r = icp(frame, target, last, cfg)
        except HoregError:
            poses.append(last)
            valid.append(False)
            resid.append(np.nan)
            continue
        poses.append(pose)
        valid.append(True)
        resid.append(r)
        last = pose
    return PoseSequence(poses, np.array(valid), np.array(resid))
