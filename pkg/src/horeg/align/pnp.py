"""Perspective-n-point: normalised DLT followed by Gauss-Newton refinement."""
from dataclasses import dataclass

import numpy as np

from ..errors import DivergedRefinement, InsufficientPoints, NumericalError
from ..geom import (IDENTITY_ROT6, CameraIntrinsics, RigidTransform, Rotation,
                    orth_jacobian, orth_matrix)


@dataclass(frozen=True)
class PnPResult:
    pose: RigidTransform
    rmse: float
    init_rmse: float
    iterations: int


def reprojection_rmse(pose: RigidTransform, points3d, points2d, K: CameraIntrinsics) -> float:
    return _rmse(pose.R, pose.t, np.asarray(points3d, float), np.asarray(points2d, float), K)


def _rmse(R, t, points3d, points2d, K) -> float:
    cam = points3d @ R.T + t
    if np.any(cam[:, 2] <= 0):
        return float("inf")
    err = K.project(cam) - points2d
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def _hartley(x):
    mu = x.mean(axis=0)
    d = np.sqrt(np.mean(np.sum((x - mu) ** 2, axis=1)))
    s = np.sqrt(x.shape[1]) / max(d, 1e-300)
    T = np.eye(x.shape[1] + 1)
    T[:-1, :-1] *= s
    T[:-1, -1] = -s * mu
    return T


def dlt(points3d, points2d, K: CameraIntrinsics) -> RigidTransform:
    """Linear pose from >= 6 correspondences using normalised coordinates."""
    X = np.asarray(points3d, float)
    uv = np.asarray(points2d, float)
    if len(X) < 6:
        raise InsufficientPoints("DLT needs at least 6 correspondences")
    xn = np.c_[uv, np.ones(len(uv))] @ np.linalg.inv(K.K).T
    xn = xn[:, :2]
    T3 = _hartley(X)
    T2 = _hartley(xn)
    Xh = np.c_[X, np.ones(len(X))] @ T3.T
    xh = np.c_[xn, np.ones(len(xn))] @ T2.T

    A = np.zeros((2 * len(X), 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xh[:, [0]] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xh[:, [1]] * Xh
    _, _, Vt = np.linalg.svd(A)
    P = np.linalg.inv(T2) @ Vt[-1].reshape(3, 4) @ T3

    M = P[:, :3]
    U, s, Vt2 = np.linalg.svd(M)
    R = U @ Vt2
    scale = s.mean()
    if np.linalg.det(R) < 0:
        R, scale = -R, -scale
    # P = scale * [R | t]; the sign of scale is fixed by det(R) = +1
    return RigidTransform.from_rt(R, P[:, 3] / scale)


_G_IDENTITY = orth_jacobian(IDENTITY_ROT6)


def _residuals_and_jacobian(R0, t0, X, uv, K):
    """Reprojection residuals and their Jacobian w.r.t. (rot6, dt) at rot6 = identity rows."""
    Xc = X @ R0.T + t0
    x, y, z = Xc.T
    r = np.c_[K.fx * x / z + K.cx, K.fy * y / z + K.cy] - uv
    # d(u, v) / d Xc
    J_proj = np.zeros((len(X), 2, 3))
    J_proj[:, 0, 0] = K.fx / z
    J_proj[:, 0, 2] = -K.fx * x / z**2
    J_proj[:, 1, 1] = K.fy / z
    J_proj[:, 1, 2] = -K.fy * y / z**2
    G = _G_IDENTITY                                        # (3, 3, 6)
    # Xc = R0 G(r6) X + t0 + dt
    dXc_dr6 = np.einsum("ab,bcj,nc->naj", R0, G, X)        # (n, 3, 6)
    J = np.concatenate([np.einsum("nia,naj->nij", J_proj, dXc_dr6), J_proj], axis=2)
    return r.reshape(-1), J.reshape(-1, 9)


def gauss_newton_pose(init: RigidTransform, points3d, points2d, K: CameraIntrinsics,
                      max_iterations: int = 50, tol: float = 1e-12):
    """Refine a pose on reprojection error; only error-decreasing steps are accepted."""
    X = np.asarray(points3d, float)
    uv = np.asarray(points2d, float)
    R, t = init.R, init.t.copy()
    cost = reprojection_rmse(init, X, uv, K)
    it = 0
    for it in range(1, max_iterations + 1):
        r, J = _residuals_and_jacobian(R, t, X, uv, K)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        improved = False
        alpha = 1.0
        for _ in range(12):
            try:
                Rn = R @ orth_matrix(IDENTITY_ROT6 + alpha * step[:6])
            except NumericalError:
                alpha *= 0.5
                continue
            tn = t + alpha * step[6:]
            c = _rmse(Rn, tn, X, uv, K)
            if c < cost:
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        rel = (cost - c) / max(cost, 1e-300)
        R, t, cost = Rn, tn, c
        if rel < tol:
            break
    return RigidTransform.from_rt(R, t), cost, it


def _fallback_inits(X, uv, K):
    """Starting poses for 4-5 points where DLT is underdetermined."""
    centroid = X.mean(axis=0)
    spread3 = np.sqrt(np.mean(np.sum((X - centroid) ** 2, axis=1)))
    spread2 = np.sqrt(np.mean(np.sum((uv - uv.mean(0)) ** 2, axis=1)))
    depth = K.fx * spread3 / max(spread2, 1e-9)
    ray = np.r_[(uv.mean(0) - [K.cx, K.cy]) / [K.fx, K.fy], 1.0] * depth
    inits = []
    for axis in np.eye(3):
        for ang in (0.0, np.pi / 2, np.pi, 3 * np.pi / 2):
            for flip in (None, *np.eye(3)):
                R = Rotation.from_axis_angle(axis, ang) if ang else Rotation.identity()
                if flip is not None:
                    R = Rotation.from_axis_angle(flip, np.pi) * R
                inits.append(RigidTransform(R, ray - R.apply(centroid)))
    return inits


def pnp(points3d, points2d, K: CameraIntrinsics, max_iterations: int = 50,
        max_rmse: float = 50.0) -> PnPResult:
    """Camera-from-model pose from 3D-2D correspondences."""
    X = np.asarray(points3d, float)
    uv = np.asarray(points2d, float)
    if len(X) != len(uv):
        raise ValueError("points3d and points2d lengths differ")
    if len(X) < 4:
        raise InsufficientPoints(f"PnP needs >= 4 points, got {len(X)}")
    inits = []
    if len(X) >= 6:
        try:
            inits.append(dlt(X, uv, K))
        except NumericalError:
            pass
    # noisy near-planar input can put the DLT solution behind the camera
    if not inits or not np.isfinite(reprojection_rmse(inits[0], X, uv, K)):
        inits += _fallback_inits(X, uv, K)
    best = None
    for init in inits:
        init_rmse = reprojection_rmse(init, X, uv, K)
        if not np.isfinite(init_rmse) and len(inits) > 1:
            continue
        pose, rmse, it = gauss_newton_pose(init, X, uv, K, max_iterations)
        if best is None or rmse < best.rmse:
            best = PnPResult(pose, rmse, init_rmse, it)
    if best is None or not np.isfinite(best.rmse) or best.rmse > max_rmse:
        raise DivergedRefinement(f"PnP reprojection RMSE {getattr(best, 'rmse', np.inf):.3g} px")
    return best
