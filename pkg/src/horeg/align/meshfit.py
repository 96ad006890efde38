"""Rigid registration of one mesh against oriented samples shared with a second, fixed mesh."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import DataError, DivergedRefinement, NumericalError
from ..geom import (IDENTITY_ROT6, RigidTransform, TriangleMesh, barycentric_normals,
                    orth_jacobian, orth_matrix, sample_surface)
from .meshdist import MeshQuery, SurfaceSamples, as_query


@dataclass(frozen=True)
class MeshFitConfig:
    lambda_normal: float = 1e-6   # m^2, i.e. 1 mm^2
    num_samples: int = 30000
    seed: int = 0
    max_iterations: int = 50

    def __post_init__(self):
        if self.lambda_normal < 0:
            raise DataError("lambda_normal must be >= 0")
        if self.num_samples <= 0:
            raise DataError("num_samples must be > 0")


def sample_oriented(mesh: TriangleMesh, n: int, seed: int = 0) -> SurfaceSamples:
    """Area-uniform samples carrying barycentrically interpolated vertex normals."""
    pts, face, bary = sample_surface(mesh, n, seed, return_index=True)
    return SurfaceSamples(pts, barycentric_normals(mesh, face, bary))


def _distances(samples: SurfaceSamples, query: MeshQuery, lam: float):
    cp = query.closest(samples.positions)
    n_p = query.normals_at(cp)
    d = cp.sq_dist + lam * np.sum((samples.normals - n_p) ** 2, axis=1)
    return d, cp, n_p


def two_mesh_objective(ho_samples: SurfaceSamples, mesh_a, mesh_b, cfg: MeshFitConfig = MeshFitConfig()) -> float:
    """Mean over samples of min(d(x, A), d(x, B))."""
    da, _, _ = _distances(ho_samples, as_query(mesh_a), cfg.lambda_normal)
    db, _, _ = _distances(ho_samples, as_query(mesh_b), cfg.lambda_normal)
    return float(np.mean(np.minimum(da, db)))


def fit_mesh_pose(movable: TriangleMesh, fixed: TriangleMesh, ho_samples: SurfaceSamples,
                  init: RigidTransform, cfg: MeshFitConfig = MeshFitConfig(),
                  history: Optional[list] = None) -> RigidTransform:
    """Pose of ``movable`` minimising the two-mesh objective.

    Gauss-Newton on the 6D rotation parametrisation with backtracking; the
    closest points are recomputed after every accepted step. Samples whose
    minimum is attained on ``fixed`` contribute no rows. Face-interior
    contacts use a point-to-plane position residual, which equals the
    squared point distance there.
    """
    lam = cfg.lambda_normal
    q_mov = MeshQuery(movable)
    d_fixed, _, _ = _distances(ho_samples, as_query(fixed), lam)
    x, nx = ho_samples.positions, ho_samples.normals
    G = orth_jacobian(IDENTITY_ROT6)

    def evaluate(R, t):
        # query in the movable mesh frame; distances are rigid-invariant
        local = SurfaceSamples((x - t) @ R, nx @ R)
        d_mov, cp, n_p = _distances(local, q_mov, lam)
        return float(np.mean(np.minimum(d_mov, d_fixed))), d_mov, cp, n_p

    R, t = init.R, init.t.copy()
    obj, d_mov, cp, n_p = evaluate(R, t)
    if not np.isfinite(obj):
        raise DivergedRefinement("objective is not finite at the initial pose")
    if history is not None:
        history.append(obj)

    for _ in range(cfg.max_iterations):
        use = d_mov < d_fixed
        if not np.any(use):
            break
        p_l, nl = cp.points[use], n_p[use]
        bary, faces = cp.bary[use], cp.faces[use]
        xw, nxw = x[use], nx[use]
        dR_p = np.einsum("ab,bcj,nc->naj", R, G, p_l)     # d(R p) / d rot6
        dR_n = np.einsum("ab,bcj,nc->naj", R, G, nl)

        interior = np.all(bary > 1e-9, axis=1)
        fn = (q_mov.face_normals[faces[interior]]) @ R.T
        y = p_l @ R.T + t
        rows, res = [], []
        # point-to-plane rows for face-interior contacts
        rows.append(-np.concatenate([np.einsum("na,naj->nj", fn, dR_p[interior]), fn], axis=1))
        res.append(np.einsum("na,na->n", fn, xw[interior] - y[interior]))
        # full vector rows at edges and vertices
        e = ~interior
        if np.any(e):
            Jp = -np.concatenate([dR_p[e], np.broadcast_to(np.eye(3), (int(e.sum()), 3, 3))], axis=2)
            rows.append(Jp.reshape(-1, 9))
            res.append((xw[e] - y[e]).reshape(-1))
        if lam > 0:
            s = np.sqrt(lam)
            Jn = -s * np.concatenate([dR_n, np.zeros((len(nl), 3, 3))], axis=2)
            rows.append(Jn.reshape(-1, 9))
            res.append((s * (nxw - nl @ R.T)).reshape(-1))
        J = np.concatenate(rows)
        r = np.concatenate(res)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)

        alpha, accepted = 1.0, False
        for _ in range(20):
            try:
                Rn = R @ orth_matrix(IDENTITY_ROT6 + alpha * step[:6])
            except NumericalError:
                alpha *= 0.5
                continue
            tn = t + alpha * step[6:]
            cand = evaluate(Rn, tn)
            if cand[0] < obj:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        gain = obj - cand[0]
        R, t = Rn, tn
        obj, d_mov, cp, n_p = cand
        if history is not None:
            history.append(obj)
        if gain <= 1e-12 * max(obj, 1e-300) or obj == 0.0:
            break
    return RigidTransform.from_rt(R, t)
