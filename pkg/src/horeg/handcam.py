"""Camera poses from per-frame hand keypoints, with temporal smoothing.

Each frame's wrist-centred 3D joints are placed in the camera frame by PnP
against the 2D detections. Relative camera motion then follows from rigid
Procrustes between frames, assuming the hand does not move w.r.t. the object.
"""
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .align.pnp import pnp
from .align.procrustes import umeyama
from .errors import DataError, HoregError, InsufficientPoints
from .geom import (CameraIntrinsics, PoseSequence, RigidTransform, Rotation, geodesic_angle,
                   so3_exp, so3_log)

N_JOINTS = 21
CONFIDENCE_GATE = 0.3
MIN_JOINTS = 6


@dataclass(frozen=True, eq=False)
class HandKeypoints:
    joints2d: np.ndarray          # (21, 2) px
    joints3d_wrist: np.ndarray    # (21, 3) m, wrist-centred
    confidence: np.ndarray        # (21,) in [0, 1]
    valid: bool = True

    def __post_init__(self):
        j2 = np.asarray(self.joints2d, float)
        j3 = np.asarray(self.joints3d_wrist, float)
        c = np.asarray(self.confidence, float)
        if j2.shape != (N_JOINTS, 2) or j3.shape != (N_JOINTS, 3) or c.shape != (N_JOINTS,):
            raise DataError("hand keypoints must hold 21 joints")
        if np.abs(j3[0]).max() > 1e-9:
            raise DataError("wrist joint must sit at the origin")
        if np.any((c < 0) | (c > 1)):
            raise DataError("confidences must lie in [0, 1]")
        object.__setattr__(self, "joints2d", j2)
        object.__setattr__(self, "joints3d_wrist", j3)
        object.__setattr__(self, "confidence", c)

    @property
    def confident(self) -> np.ndarray:
        return self.confidence > CONFIDENCE_GATE


NONE = "none"
FIXED_HAND_POSE = "fixed_hand_pose"
SLIDING_MEDIAN = "sliding_median"


@dataclass(frozen=True)
class SmoothingMode:
    kind: str = NONE
    window: int = 5

    def __post_init__(self):
        if self.kind not in (NONE, FIXED_HAND_POSE, SLIDING_MEDIAN):
            raise DataError(f"unknown smoothing mode {self.kind!r}")
        if self.window < 3 or self.window % 2 == 0:
            raise DataError("median window must be odd and >= 3")

    @classmethod
    def parse(cls, text: str) -> "SmoothingMode":
        """Accepts ``none``, ``fixed`` and ``medianN`` (e.g. ``median5``)."""
        if text in ("none", NONE):
            return cls(NONE)
        if text in ("fixed", FIXED_HAND_POSE):
            return cls(FIXED_HAND_POSE)
        if text.startswith("median"):
            return cls(SLIDING_MEDIAN, int(text[6:] or 5))
        raise DataError(f"unknown smoothing mode {text!r}")


def hand_pose(k: HandKeypoints, K: CameraIntrinsics) -> RigidTransform:
    """Camera-from-wrist pose by PnP on the confident joints."""
    if not k.valid:
        raise InsufficientPoints("keypoints flagged invalid")
    sel = k.confident
    if sel.sum() < MIN_JOINTS:
        raise InsufficientPoints(f"{int(sel.sum())} confident joints, need {MIN_JOINTS}")
    return pnp(k.joints3d_wrist[sel], k.joints2d[sel], K).pose


def lift_keypoints(k: HandKeypoints, K: CameraIntrinsics) -> np.ndarray:
    """21 x 3 joints in the camera frame."""
    return hand_pose(k, K).apply(k.joints3d_wrist)


def relative_rigid(frames: Sequence[Optional[np.ndarray]], confident: Optional[Sequence[np.ndarray]] = None
                   ) -> PoseSequence:
    """Camera poses relative to the first valid frame from camera-frame joints.

    ``frames[i]`` is a 21 x 3 array or None when lifting failed. Poses map the
    reference camera's frame into camera i (camera_from_world with the
    reference camera as world). Procrustes uses joints confident in both
    frames; frames without 6 such joints are invalid and carry the last valid
    pose.
    """
    n = len(frames)
    if confident is None:
        confident = [np.ones(N_JOINTS, bool) if f is not None else None for f in frames]
    ref = next((i for i, f in enumerate(frames) if f is not None), None)
    if ref is None:
        raise DataError("relative_rigid needs at least one valid frame")
    X0, c0 = np.asarray(frames[ref], float), np.asarray(confident[ref], bool)
    poses, valid = [], []
    last = RigidTransform.identity()
    for i in range(n):
        if i == ref:
            pose, ok = RigidTransform.identity(), True
        elif frames[i] is None:
            pose, ok = last, False
        else:
            both = c0 & np.asarray(confident[i], bool)
            try:
                if both.sum() < MIN_JOINTS:
                    raise InsufficientPoints("too few shared confident joints")
                pose, ok = umeyama(X0[both], np.asarray(frames[i], float)[both], with_scale=False).rigid(), True
            except HoregError:
                pose, ok = last, False
        if ok:
            last = pose
        poses.append(pose)
        valid.append(ok)
    return PoseSequence(poses, np.array(valid))


# -------------------------------------------------------------- smoothing

def _windows(n: int, w: int) -> np.ndarray:
    h = w // 2
    return np.clip(np.arange(n)[:, None] + np.arange(-h, h + 1)[None], 0, n - 1)


def fixed_hand_pose(seq: Sequence[HandKeypoints]) -> List[HandKeypoints]:
    """Replace every frame's wrist-centred joints by the median over valid frames."""
    good = [k.joints3d_wrist for k in seq if k.valid]
    if not good:
        return list(seq)
    med = np.median(np.stack(good), axis=0)
    med[0] = 0.0
    return [replace(k, joints3d_wrist=med) for k in seq]


def _sliding_keypoints(seq: Sequence[HandKeypoints], w: int) -> List[HandKeypoints]:
    idx = _windows(len(seq), w)
    j2 = np.stack([k.joints2d for k in seq])
    j3 = np.stack([k.joints3d_wrist for k in seq])
    return [replace(k, joints2d=np.median(j2[ix], axis=0), joints3d_wrist=np.median(j3[ix], axis=0))
            for k, ix in zip(seq, idx)]


def rotation_median(rots: Sequence[Rotation], max_iterations: int = 20, tol: float = 1e-8) -> Rotation:
    """Geodesic L1 median by Weiszfeld iterations in the tangent space.

    Logs of relative rotations take the short arc, so quaternion signs never
    matter. Starts from the sample minimising the summed geodesic distance;
    when that sample already satisfies the optimality condition it is
    returned as is. Steps taken from a sample use the Vardi-Zhang shrink, and
    the iterate with the lowest summed distance is returned.
    """
    rots = list(rots)
    if len(rots) == 1:
        return rots[0]
    D = np.array([[geodesic_angle(a, b) for b in rots] for a in rots])
    k = int(np.argmin(D.sum(axis=1)))
    m = best = rots[k]
    best_cost = D[k].sum()
    for _ in range(max_iterations):
        logs = np.array([so3_log(m.inverse() * r) for r in rots])
        d = np.linalg.norm(logs, axis=1)
        at = d < 1e-12
        far = ~at
        if not np.any(far):
            break
        pull = (logs[far] / d[far, None]).sum(axis=0)
        r = np.linalg.norm(pull)
        eta = at.sum()
        if r <= eta:
            break
        step = (1.0 - eta / r) * pull / (1.0 / d[far]).sum()
        m = m * so3_exp(step)
        cost = sum(geodesic_angle(m, x) for x in rots)
        if cost < best_cost:
            best, best_cost = m, cost
        if np.linalg.norm(step) < tol:
            break
    return best


def _sliding_poses(seq: PoseSequence, w: int) -> PoseSequence:
    n = len(seq)
    if n == 0:
        return seq
    good = np.flatnonzero(seq.valid)
    if len(good) == 0:
        return seq
    t = seq.translations()
    out = []
    for i in range(n):
        # windows index valid frames only so carried poses do not vote
        lo = np.clip(np.searchsorted(good, i) + np.arange(-(w // 2), w // 2 + 1), 0, len(good) - 1)
        ix = good[lo]
        R = rotation_median([seq.poses[j].rotation for j in ix])
        out.append(RigidTransform(R, np.median(t[ix], axis=0)))
    return PoseSequence(out, seq.valid, seq.residuals)


def smooth(seq, mode: SmoothingMode):
    """Smooth keypoint lists or pose sequences.

    Pose sequences accept ``sliding_median`` only; ``fixed_hand_pose`` acts on
    keypoints before lifting.
    """
    if len(seq) == 0:
        raise DataError("cannot smooth an empty sequence")
    if mode.kind == NONE:
        return seq
    if isinstance(seq, PoseSequence):
        if mode.kind != SLIDING_MEDIAN:
            raise DataError("pose sequences support sliding_median smoothing only")
        return _sliding_poses(seq, mode.window)
    if mode.kind == FIXED_HAND_POSE:
        return fixed_hand_pose(seq)
    return _sliding_keypoints(seq, mode.window)


def hand_camera_poses(seq: Sequence[HandKeypoints], K: CameraIntrinsics,
                      mode: SmoothingMode = SmoothingMode()) -> PoseSequence:
    """Keypoints to frame-relative camera poses; failed frames are flagged invalid."""
    if mode.kind == FIXED_HAND_POSE:
        seq = fixed_hand_pose(seq)
    lifted, conf = [], []
    for k in seq:
        try:
            lifted.append(lift_keypoints(k, K))
            conf.append(k.confident)
        except HoregError:
            lifted.append(None)
            conf.append(None)
    poses = relative_rigid(lifted, conf)
    if mode.kind == SLIDING_MEDIAN:
        poses = _sliding_poses(poses, mode.window)
    return poses


def synth_keypoints(joints: np.ndarray, poses: PoseSequence, K: CameraIntrinsics, sigma_px: float = 0.0,
                    sigma_3d: float = 0.0, seed: int = 0) -> List[HandKeypoints]:
    """Noisy detections of a rigid joint template seen from ``poses``."""
    rng = np.random.default_rng(seed)
    out = []
    for p in poses.poses:
        uv = K.project(p.apply(joints)) + rng.normal(0.0, sigma_px, (N_JOINTS, 2))
        j3 = joints + rng.normal(0.0, sigma_3d, (N_JOINTS, 3))
        j3 = j3 - j3[0]
        out.append(HandKeypoints(uv, j3, np.ones(N_JOINTS)))
    return out
