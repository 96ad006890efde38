"""Slow, independent reference implementations used to check the fast paths."""
import numpy as np
from scipy.spatial.transform import Rotation as SciRot


def _closest_on_segments(p, a, b):
    ab = b - a
    s = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    return a + s[:, None] * ab


def closest_on_triangles(p, A, B, C):
    """Closest point of ``p`` on each triangle: the plane projection when it falls
    inside, otherwise the best of the three edge segments."""
    n = np.cross(B - A, C - A)
    nn = np.einsum("ij,ij->i", n, n)
    q = p - (np.einsum("ij,ij->i", p - A, n) / nn)[:, None] * n
    w0 = np.einsum("ij,ij->i", np.cross(C - B, q - B), n) / nn
    w1 = np.einsum("ij,ij->i", np.cross(A - C, q - C), n) / nn
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    P = np.broadcast_to(p, A.shape)
    edges = np.stack([_closest_on_segments(P, A, B), _closest_on_segments(P, B, C),
                      _closest_on_segments(P, C, A)])
    d2 = np.sum((edges - p) ** 2, axis=2)
    best = edges[np.argmin(d2, axis=0), np.arange(len(A))]
    return np.where(inside[:, None], q, best)


def barycentric(p, a, b, c):
    v0, v1, v2 = b - a, c - a, p - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return np.array([1.0 - v - w, v, w])


def brute_point_mesh(x, nx, mesh, lam):
    """Exhaustive search over every triangle; returns (d, p, n_p)."""
    tri = mesh.triangles()
    q = closest_on_triangles(x, tri[:, 0], tri[:, 1], tri[:, 2])
    d2 = np.sum((q - x) ** 2, axis=1)
    f = int(np.argmin(d2))
    bc = np.clip(barycentric(q[f], *tri[f]), 0.0, 1.0)
    n = bc @ mesh.normals()[mesh.faces[f]]
    n /= np.linalg.norm(n)
    return float(d2[f]) + lam * float(np.sum((nx - n) ** 2)), q[f], n


def brute_recon(pred, gt, thresholds):
    D = np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
    acc, comp = D.min(axis=1), D.min(axis=0)
    out = {}
    for t in thresholds:
        p = 100.0 * sum(1 for d in acc if d <= t) / len(acc)
        r = 100.0 * sum(1 for d in comp if d <= t) / len(comp)
        out[t] = (p, r, 2 * p * r / (p + r) if p + r else 0.0)
    return 100.0 * acc.mean(), 100.0 * comp.mean(), out


def rel_pose_errors(pred_R, pred_t, gt_R, gt_t, ref=0):
    """Per-frame (deg, m) errors of poses relative to frame ``ref``, via scipy rotations."""
    rot, tr = [], []
    for i in range(len(gt_R)):
        if i == ref:
            continue
        Ra = pred_R[i] @ pred_R[ref].T
        Rb = gt_R[i] @ gt_R[ref].T
        ta = pred_t[i] - Ra @ pred_t[ref]
        tb = gt_t[i] - Rb @ gt_t[ref]
        rot.append(np.degrees(SciRot.from_matrix(Ra.T @ Rb).magnitude()))
        tr.append(float(np.linalg.norm(ta - tb)))
    return np.array(rot), np.array(tr)


def angle_deg(A, B):
    return float(np.degrees(SciRot.from_matrix(A.T @ B).magnitude()))
