"""Reconstruction and pose metrics, plus per-tag aggregation."""
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .align.procrustes import umeyama
from .errors import DataError, EmptyGroup, HoregError, LengthMismatch
from .geom import (PoseSequence, RigidTransform, SimilarityTransform, TriangleMesh, geodesic_angle,
                   sample_surface)

DEFAULT_THRESHOLDS = (0.005,)
DEFAULT_PAIRS = ((0.02, 4.0), (0.05, 10.0), (0.10, 20.0))
FRAME0 = "frame0"
CONSECUTIVE = "consecutive"

__all__ = ["ReconReport", "PoseReport", "sample_surface", "recon_metrics", "align_samples", "eval_recon",
           "eval_poses", "grouped_report", "report_records", "report_from_dict"]


def _key(x: float) -> str:
    return repr(float(x))


@dataclass
class ReconReport:
    """Distances in cm, ratios and F-scores in percent keyed by threshold (m, as repr string)."""

    rec_rate: float
    acc: float
    comp: float
    acc_ratio_at: Dict[str, float]
    comp_ratio_at: Dict[str, float]
    fscore_at: Dict[str, float]
    thresholds: List[float]
    kind: str = "recon"

    @classmethod
    def failed(cls, thresholds=DEFAULT_THRESHOLDS) -> "ReconReport":
        nan = {_key(t): float("nan") for t in thresholds}
        return cls(0.0, float("nan"), float("nan"), dict(nan), dict(nan), dict(nan), list(map(float, thresholds)))

    def metrics(self) -> List[Tuple[str, str, float]]:
        out = [("rec_rate", "", self.rec_rate), ("acc_cm", "", self.acc), ("comp_cm", "", self.comp)]
        for t in self.thresholds:
            k = _key(t)
            out += [("acc_ratio", k, self.acc_ratio_at[k]), ("comp_ratio", k, self.comp_ratio_at[k]),
                    ("fscore", k, self.fscore_at[k])]
        return out


@dataclass
class PoseReport:
    """Per-frame errors of relative poses; the reference frame itself is excluded."""

    frames: List[int]
    rot_error_deg: List[float]
    trans_error_m: List[float]        # Euclidean norm
    trans_sq_error_m2: List[float]    # squared norm, averaged into trans_mse
    det_rate: float
    quality_at: Dict[str, float]
    pairs: List[Tuple[float, float]]
    scale: float = 1.0
    relative: str = FRAME0
    kind: str = "poses"

    @property
    def trans_mse(self) -> float:
        return float(np.mean(self.trans_sq_error_m2)) if self.trans_sq_error_m2 else float("nan")

    @property
    def rot_error_mean(self) -> float:
        return float(np.mean(self.rot_error_deg)) if self.rot_error_deg else float("nan")

    def metrics(self) -> List[Tuple[str, str, float]]:
        out = [("det_rate", "", self.det_rate), ("rot_error_deg_mean", "", self.rot_error_mean),
               ("trans_mse_m2", "", self.trans_mse),
               ("trans_rmse_m", "", float(np.sqrt(self.trans_mse)))]
        for tt, tr in self.pairs:
            k = _pair_key(tt, tr)
            out.append(("quality", k, self.quality_at[k]))
        return out


def _pair_key(tt, tr) -> str:
    return f"{_key(tt)}m&{_key(tr)}deg"


def report_records(report) -> List[Tuple[str, str, float]]:
    return report.metrics()


def report_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "recon":
        return ReconReport(**d, kind=kind)
    if kind == "poses":
        d["pairs"] = [tuple(p) for p in d["pairs"]]
        return PoseReport(**d, kind=kind)
    raise DataError(f"unknown report kind {kind!r}")


def report_to_dict(report) -> dict:
    return asdict(report)


# ------------------------------------------------------------ reconstruction

def recon_metrics(pred_pts: np.ndarray, gt_pts: np.ndarray, thresholds=DEFAULT_THRESHOLDS) -> ReconReport:
    """Sample-to-sample metrics without any alignment."""
    d_acc, _ = cKDTree(gt_pts).query(pred_pts)
    d_comp, _ = cKDTree(pred_pts).query(gt_pts)
    acc_r, comp_r, fs = {}, {}, {}
    for t in thresholds:
        k = _key(t)
        p = 100.0 * np.count_nonzero(d_acc <= t) / len(d_acc)
        r = 100.0 * np.count_nonzero(d_comp <= t) / len(d_comp)
        acc_r[k], comp_r[k] = p, r
        fs[k] = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return ReconReport(100.0, 100.0 * float(d_acc.mean()), 100.0 * float(d_comp.mean()),
                       acc_r, comp_r, fs, list(map(float, thresholds)))


def _mutual_pairs(a, b):
    _, ab = cKDTree(b).query(a)
    _, ba = cKDTree(a).query(b)
    i = np.flatnonzero(ba[ab] == np.arange(len(a)))
    return i, ab[i]


def _chamfer(a, b):
    return float(cKDTree(b).query(a)[0].mean() + cKDTree(a).query(b)[0].mean())


def align_samples(pred_pts: np.ndarray, gt_pts: np.ndarray, rounds: int = 3) -> SimilarityTransform:
    """Similarity taking pred samples onto gt samples.

    Two starts (identity; centroid and RMS-radius matching) are each refined
    by ``rounds`` of Umeyama on mutual nearest neighbours; the start with the
    lower chamfer distance wins.
    """
    mp, mg = pred_pts.mean(axis=0), gt_pts.mean(axis=0)
    sp = np.sqrt(np.mean(np.sum((pred_pts - mp) ** 2, axis=1)))
    sg = np.sqrt(np.mean(np.sum((gt_pts - mg) ** 2, axis=1)))
    s0 = sg / sp if sp > 0 else 1.0
    starts = [SimilarityTransform.identity(),
              SimilarityTransform(s0, RigidTransform.identity().rotation, mg - s0 * mp)]
    best, best_c = None, np.inf
    for T in starts:
        for _ in range(rounds):
            i, j = _mutual_pairs(T.apply(pred_pts), gt_pts)
            try:
                T = umeyama(pred_pts[i], gt_pts[j], with_scale=True)
            except HoregError:
                break
        c = _chamfer(T.apply(pred_pts), gt_pts)
        if c < best_c:
            best, best_c = T, c
    return best


def eval_recon(pred: Optional[TriangleMesh], gt: TriangleMesh, n_samples: int = 30000,
               thresholds=DEFAULT_THRESHOLDS, seed: int = 0, align: bool = True) -> ReconReport:
    """Accuracy, completeness and F-score after similarity alignment; ``pred=None`` is a failed run."""
    if pred is None:
        return ReconReport.failed(thresholds)
    P = sample_surface(pred, n_samples, seed)
    G = sample_surface(gt, n_samples, seed + 1)
    if align:
        P = align_samples(P, G).apply(P)
    return recon_metrics(P, G, thresholds)


# ------------------------------------------------------------------ poses

def _relative(R, t, ref, i):
    Rr = R[i] @ R[ref].T
    return Rr, t[i] - Rr @ t[ref]


def _angle_deg(Ra, Rb):
    M = Ra.T @ Rb
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = 0.5 * (np.trace(M) - 1.0)
    return float(np.degrees(np.arctan2(s, c)))


def eval_poses(pred: PoseSequence, gt: PoseSequence, pairs=DEFAULT_PAIRS, relative: str = FRAME0,
               scale_free: bool = False) -> PoseReport:
    """Errors of relative poses (w.r.t. the first valid frame, or consecutive pairs).

    With ``scale_free`` the predicted translations are rescaled by the scale of
    a similarity fit of predicted onto true camera centres. Quality counts
    inclusive thresholds on the translation norm (m) and rotation angle (deg).
    """
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predicted vs {len(gt)} ground-truth poses")
    if relative not in (FRAME0, CONSECUTIVE):
        raise DataError(f"unknown relative mode {relative!r}")
    n = len(gt)
    valid = np.asarray(pred.valid, bool) & np.asarray(gt.valid, bool)
    det_rate = 100.0 * np.count_nonzero(pred.valid) / n if n else 0.0
    Rp, tp = pred.rotation_matrices(), pred.translations()
    Rg, tg = gt.rotation_matrices(), gt.translations()
    scale = 1.0
    if scale_free and valid.sum() >= 3:
        try:
            # the fit maps pred centres onto gt centres, so its scale is gt / pred
            scale = umeyama(pred.camera_centers()[valid], gt.camera_centers()[valid]).scale
        except HoregError:
            scale = 1.0
    tp = tp * scale

    frames, rot, tr = [], [], []
    idx = np.flatnonzero(valid)
    if relative == FRAME0:
        todo = [(idx[0], i) for i in idx[1:]] if len(idx) else []
    else:
        todo = [(i - 1, i) for i in range(1, n) if valid[i] and valid[i - 1]]
    for ref, i in todo:
        Ra, ta = _relative(Rp, tp, ref, i)
        Rb, tb = _relative(Rg, tg, ref, i)
        frames.append(int(i))
        rot.append(_angle_deg(Ra, Rb))
        tr.append(float(np.linalg.norm(ta - tb)))
    rot_a, tr_a = np.array(rot), np.array(tr)
    quality = {}
    for tt, trd in pairs:
        ok = (tr_a <= tt) & (rot_a <= trd)
        quality[_pair_key(tt, trd)] = 100.0 * np.count_nonzero(ok) / len(ok) if len(ok) else 0.0
    return PoseReport(frames, rot, tr, [x * x for x in tr], det_rate, quality,
                      [tuple(map(float, p)) for p in pairs], float(scale), relative)


# ------------------------------------------------------------- grouping

def grouped_report(items: Iterable[Tuple[str, object]], tags: Optional[Sequence[str]] = None
                   ) -> Dict[str, Dict[Tuple[str, str], Tuple[float, float]]]:
    """Per tag and metric: (mean, population std) over the reports carrying that tag."""
    groups: Dict[str, List] = {}
    for tag, rep in items:
        groups.setdefault(tag, []).append(rep)
    for t in tags or ():
        if t not in groups:
            raise EmptyGroup(f"no report carries tag {t!r}")
    if not groups:
        raise EmptyGroup("no reports to group")
    out = {}
    for tag, reps in groups.items():
        vals: Dict[Tuple[str, str], List[float]] = {}
        for r in reps:
            for name, thr, v in report_records(r):
                vals.setdefault((name, thr), []).append(v)
        out[tag] = {k: (float(np.mean(v)), float(np.std(v))) for k, v in vals.items()}
    return out
