import numpy as np

from ..errors import DegenerateConfiguration, InsufficientPoints
from ..geom import Rotation, SimilarityTransform


def umeyama(src, dst, with_scale: bool = True, weights=None) -> SimilarityTransform:
    """Least-squares similarity (or rigid) transform mapping ``src`` onto ``dst``.

    Reflections are excluded by flipping the sign of the smallest singular
    direction when the cross-covariance has negative determinant.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("umeyama expects two n x 3 arrays of equal shape")
    if len(src) < 3:
        raise InsufficientPoints(f"umeyama needs >= 3 points, got {len(src)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()

    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    cov = (xd * w[:, None]).T @ xs
    U, d, Vt = np.linalg.svd(cov)
    scale_ref = max(d[0], 1e-300)
    if d[1] <= 1e-12 * scale_ref or d[0] < 1e-300:
        raise DegenerateConfiguration("cross-covariance has rank < 2")
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt

    if with_scale:
        var_s = w @ np.sum(xs * xs, axis=1)
        c = float((d * S).sum() / var_s)
    else:
        c = 1.0
    t = mu_d - c * R @ mu_s
    return SimilarityTransform(c, Rotation.from_matrix(R), t)
