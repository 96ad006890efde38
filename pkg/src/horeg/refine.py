"""Photometric refinement of per-frame poses against a coloured reference mesh.

Each frame's pose is corrected as R' = R orth(rot6), t' = t + dt. The total
loss is

    L = L_rgb + lambda_smooth (L_t + L_R) + lambda_wd L_wd

where L_rgb is a masked squared colour error between a point-splat rendering
of the mesh and the observed frames, L_t / L_R penalise the discrete second
difference of translations (cm) and adjacent rotation angles (deg) with
stop-gradients on the neighbours, and L_wd keeps corrections small.

Rendering: coloured surface points are projected with a z-buffer of one
pixel footprint (back faces culled). For every sampled masked pixel the
winning point's colour is compared with the observation interpolated at the
point's projected sub-pixel position, so gradients reach the pose through
the projection and the appearance through the colour. The winner selection
is held constant while differentiating.
"""
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, NoMaskedPixels
from .geom import (IDENTITY_ROT6, CameraIntrinsics, PoseSequence, RigidTransform, TriangleMesh,
                   barycentric_normals, orth_jacobian, orth_matrix, sample_surface)

RAD2DEG = 180.0 / np.pi
LEVELS = 255.0
M2CM = 100.0
DEFAULT_GRID = tuple((s, w) for s in (1e-3, 1e-2, 1e-1) for w in (1e-4, 1e-3))


@dataclass(frozen=True)
class RefineConfig:
    lambda_smooth: float = 1e-2
    lambda_wd: float = 1e-3
    iterations: int = 250
    samples_per_camera: int = 500
    lr_appearance: float = 0.5
    lr_pose: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    num_points: int = 30000
    seed: int = 0
    grid: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self):
        positive = (self.lambda_smooth, self.lambda_wd, self.samples_per_camera, self.lr_appearance,
                    self.lr_pose, self.adam_eps, self.num_points)
        if any(v <= 0 for v in positive) or self.iterations < 1:
            raise DataError("refine configuration values must be positive and iterations >= 1")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise DataError("Adam betas must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class Frame:
    image: np.ndarray
    mask: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        img = np.asarray(self.image, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if img.shape[:2] != mask.shape or img.ndim != 3 or img.shape[2] != 3:
            raise DataError("image must be H x W x 3 and match the mask")
        if mask.shape != (self.intrinsics.height, self.intrinsics.width):
            raise DataError("frame size does not match the intrinsics")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "mask", mask)


@dataclass(eq=False)
class AppearanceModel:
    """Flat per-point colours on points sampled from the reference mesh."""

    points: np.ndarray
    normals: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.colors = np.clip(np.asarray(self.colors, dtype=float), 0.0, 1.0)

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, n: int, seed: int = 0) -> "AppearanceModel":
        pts, face, bary = sample_surface(mesh, n, seed, return_index=True)
        normals = barycentric_normals(mesh, face, bary)
        if mesh.vertex_colors is None:
            colors = np.full((n, 3), 0.5)
        else:
            colors = np.einsum("nk,nkd->nd", bary, mesh.vertex_colors[mesh.faces[face]])
        return cls(pts, normals, colors)


@dataclass(frozen=True, eq=False)
class PixelSamples:
    frame: np.ndarray   # (S,) frame index
    x: np.ndarray       # (S,) pixel column
    y: np.ndarray       # (S,) pixel row


def sample_pixels(frames: Sequence[Frame], n_per_frame: Optional[int], rng=None) -> PixelSamples:
    """Masked pixels per frame: a random subset of ``n_per_frame`` or all when None."""
    fs, xs, ys = [], [], []
    for i, fr in enumerate(frames):
        yy, xx = np.nonzero(fr.mask)
        if len(yy) == 0:
            continue
        if n_per_frame is not None and len(yy) > n_per_frame:
            pick = np.sort(rng.choice(len(yy), n_per_frame, replace=False))
            yy, xx = yy[pick], xx[pick]
        fs.append(np.full(len(yy), i))
        xs.append(xx)
        ys.append(yy)
    if not fs:
        raise NoMaskedPixels("no frame has masked pixels")
    return PixelSamples(np.concatenate(fs), np.concatenate(xs), np.concatenate(ys))


# ------------------------------------------------------------ interpolation

def _keys(x):
    """Keys cubic convolution kernel (a = -0.5) and its derivative."""
    a = -0.5
    ax = np.abs(x)
    s = np.sign(x)
    w = np.where(ax <= 1, (a + 2) * ax**3 - (a + 3) * ax**2 + 1,
                 np.where(ax < 2, a * ax**3 - 5 * a * ax**2 + 8 * a * ax - 4 * a, 0.0))
    dw = np.where(ax <= 1, 3 * (a + 2) * ax**2 - 2 * (a + 3) * ax,
                  np.where(ax < 2, 3 * a * ax**2 - 10 * a * ax + 8 * a, 0.0)) * s
    return w, dw


def sample_image(image: np.ndarray, u: np.ndarray, v: np.ndarray):
    """C1 bicubic interpolation at continuous pixel coordinates (pixel centres at integers).

    Returns values (n, 3) and derivatives w.r.t. u and v, each (n, 3).
    Indices are clamped at the border.
    """
    H, W = image.shape[:2]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    offs = np.arange(-1, 3)
    xs = x0[:, None] + offs
    ys = y0[:, None] + offs
    wx, dwx = _keys(u[:, None] - xs)
    wy, dwy = _keys(v[:, None] - ys)
    xs = np.clip(xs, 0, W - 1)
    ys = np.clip(ys, 0, H - 1)
    patch = image[ys[:, :, None], xs[:, None, :]]          # (n, 4y, 4x, 3)
    val = np.einsum("ny,nx,nyxc->nc", wy, wx, patch)
    du = np.einsum("ny,nx,nyxc->nc", wy, dwx, patch)
    dv = np.einsum("ny,nx,nyxc->nc", dwy, wx, patch)
    return val, du, dv


# ----------------------------------------------------------------- poses

def corrected_poses(R0: np.ndarray, t0: np.ndarray, rot6: np.ndarray, dt: np.ndarray):
    G = np.stack([orth_matrix(r) for r in rot6])
    return R0 @ G, t0 + dt


def _as_rt(poses):
    if isinstance(poses, PoseSequence):
        return poses.rotation_matrices(), poses.translations()
    R, t = poses
    return np.asarray(R, float), np.asarray(t, float)


# ------------------------------------------------------------- visibility

def find_winners(frames: Sequence[Frame], model: AppearanceModel, R: np.ndarray, t: np.ndarray,
                 samples: PixelSamples, near: float = 1e-4) -> np.ndarray:
    """Index of the nearest front-facing point splatted into each sampled pixel, -1 if none."""
    win = np.full(len(samples.frame), -1, np.int64)
    for i, fr in enumerate(frames):
        sel = np.flatnonzero(samples.frame == i)
        if len(sel) == 0:
            continue
        K = fr.intrinsics
        Xc = model.points @ R[i].T + t[i]
        nc = model.normals @ R[i].T
        z = Xc[:, 2]
        front = (z > near) & (np.einsum("ij,ij->i", nc, Xc) < 0)
        idx = np.flatnonzero(front)
        uv = K.project(Xc[idx])
        px = np.rint(uv[:, 0]).astype(np.int64)
        py = np.rint(uv[:, 1]).astype(np.int64)
        inb = (px >= 0) & (px < K.width) & (py >= 0) & (py < K.height)
        idx, px, py = idx[inb], px[inb], py[inb]
        pix = py * K.width + px
        wanted = np.zeros(K.width * K.height, bool)
        wanted[samples.y[sel] * K.width + samples.x[sel]] = True
        keep = wanted[pix]
        idx, pix = idx[keep], pix[keep]
        if len(idx) == 0:
            continue
        order = np.lexsort((idx, z[idx], pix))
        ps = pix[order]
        first = order[np.r_[True, ps[1:] != ps[:-1]]]
        table = np.full(K.width * K.height, -1, np.int64)
        table[pix[first]] = idx[first]
        win[sel] = table[samples.y[sel] * K.width + samples.x[sel]]
    return win


# ---------------------------------------------------------------- losses

def rgb_and_grad(frames: Sequence[Frame], model: AppearanceModel, R: np.ndarray, t: np.ndarray,
                 samples: PixelSamples, winners: Optional[np.ndarray] = None, need_grad: bool = True):
    """Masked squared colour error over the sampled pixels.

    Returns (loss, dL/dcolors (k, 3), dL/dR (N, 3, 3), dL/dt (N, 3)); the
    gradients are None when ``need_grad`` is false.
    """
    if winners is None:
        winners = find_winners(frames, model, R, t, samples)
    N = len(frames)
    loss = 0.0
    g_col = np.zeros_like(model.colors) if need_grad else None
    g_R = np.zeros((N, 3, 3)) if need_grad else None
    g_t = np.zeros((N, 3)) if need_grad else None
    for i, fr in enumerate(frames):
        sel = np.flatnonzero(samples.frame == i)
        if len(sel) == 0:
            continue
        w = winners[sel]
        hit = w >= 0
        # no winner: background renders black
        miss = sel[~hit]
        loss += float(np.sum(fr.image[samples.y[miss], samples.x[miss]] ** 2))
        k = w[hit]
        if len(k) == 0:
            continue
        K = fr.intrinsics
        P = model.points[k]
        Xc = P @ R[i].T + t[i]
        x, y, z = Xc.T
        u = K.fx * x / z + K.cx
        v = K.fy * y / z + K.cy
        obs, du, dv = sample_image(fr.image, u, v)
        e = model.colors[k] - obs
        loss += float(np.sum(e * e))
        if not need_grad:
            continue
        np.add.at(g_col, k, 2.0 * e)
        gu = -2.0 * np.sum(e * du, axis=1)
        gv = -2.0 * np.sum(e * dv, axis=1)
        gX = np.c_[gu * K.fx / z, gv * K.fy / z, -(gu * K.fx * x + gv * K.fy * y) / z**2]
        g_R[i] += gX.T @ P
        g_t[i] += gX.sum(axis=0)
    return loss, g_col, g_R, g_t


def loss_rgb(frames, model: AppearanceModel, poses, samples: Optional[PixelSamples] = None,
             winners=None) -> float:
    R, t = _as_rt(poses)
    if samples is None:
        samples = sample_pixels(frames, None)
    return rgb_and_grad(frames, model, R, t, samples, winners, need_grad=False)[0]


def smooth_t_and_grad(t: np.ndarray):
    """Translation smoothness in centimetres and its gradient (metres in, per metre out)."""
    t = np.asarray(t, float)
    N = len(t)
    g = np.zeros_like(t)
    if N < 3:
        return 0.0, g
    d = M2CM * (2.0 * t[1:-1] - (t[:-2] + t[2:]))
    n = np.linalg.norm(d, axis=1)
    loss = float(n.sum() / (2 * N))
    unit = np.where(n[:, None] > 0, d / np.where(n > 0, n, 1.0)[:, None], 0.0)
    # neighbours sit behind a stop-gradient; only the centre frame moves
    g[1:-1] = M2CM * 2.0 * unit / (2 * N)
    return loss, g


def _angle_and_grad(A, B):
    """Geodesic angle between rotation matrices and d angle / d B (ambient)."""
    M = A.T @ B
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = 0.5 * (np.trace(M) - 1.0)
    theta = np.arctan2(s, c)
    sin_t = np.sin(theta)
    g = -A / (2.0 * sin_t) if sin_t > 1e-12 else np.zeros((3, 3))
    return theta, g


def smooth_r_and_grad(R: np.ndarray):
    """Adjacent-angle rotation smoothness in degrees and its gradient w.r.t. each R."""
    R = np.asarray(R, float)
    N = len(R)
    g = np.zeros_like(R)
    if N < 3:
        return 0.0, g
    total = 0.0
    scale = RAD2DEG / (2 * N)
    for i in range(1, N - 1):
        a1, g1 = _angle_and_grad(R[i - 1], R[i])
        a2, g2 = _angle_and_grad(R[i + 1], R[i])     # symmetric angle, gradient w.r.t. R[i]
        total += a1 + a2
        g[i] = scale * (g1 + g2)
    return float(total * scale), g


def loss_smooth_t(poses) -> float:
    return smooth_t_and_grad(_as_rt(poses)[1])[0]


def loss_smooth_r(poses) -> float:
    return smooth_r_and_grad(_as_rt(poses)[0])[0]


def wd_and_grad(rot6: np.ndarray, dt: np.ndarray):
    dr = np.asarray(rot6, float) - IDENTITY_ROT6
    dt = np.asarray(dt, float)
    return float(np.sum(dr * dr) + np.sum(dt * dt)), 2.0 * dr, 2.0 * dt


def loss_wd(rot6, dt) -> float:
    return wd_and_grad(rot6, dt)[0]


@dataclass
class LossTerms:
    rgb: float
    t: float
    r: float
    wd: float
    total: float


def total_loss_and_grad(frames, model: AppearanceModel, R0, t0, rot6, dt, samples: PixelSamples,
                        lambda_smooth: float, lambda_wd: float, winners=None):
    """Full objective with analytic gradients w.r.t. (colors, rot6, dt)."""
    R, t = corrected_poses(R0, t0, rot6, dt)
    if winners is None:
        winners = find_winners(frames, model, R, t, samples)
    l_rgb, g_col, gR_rgb, gt_rgb = rgb_and_grad(frames, model, R, t, samples, winners)
    l_t, gt_s = smooth_t_and_grad(t)
    l_r, gR_s = smooth_r_and_grad(R)
    l_wd, g6_wd, gdt_wd = wd_and_grad(rot6, dt)
    total = l_rgb + lambda_smooth * (l_t + l_r) + lambda_wd * l_wd

    gR = gR_rgb + lambda_smooth * gR_s
    g6 = lambda_wd * g6_wd
    for i in range(len(rot6)):
        gG = R0[i].T @ gR[i]               # R' = R0 G
        g6[i] += np.einsum("ab,abj->j", gG, orth_jacobian(rot6[i]))
    gdt = gt_rgb + lambda_smooth * gt_s + lambda_wd * gdt_wd
    return LossTerms(l_rgb, l_t, l_r, l_wd, total), g_col, g6, gdt


# --------------------------------------------------------------- optimiser

class Adam:
    """Adam over a list of parameter arrays, one learning rate per array."""

    def __init__(self, params: List[np.ndarray], lrs: List[float], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lrs = lrs
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, grads: List[np.ndarray]):
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for p, g, m, v, lr in zip(self.params, grads, self.m, self.v, self.lrs):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(eq=False)
class RefineResult:
    poses: PoseSequence
    appearance: AppearanceModel
    history: List[dict]
    rot6: np.ndarray
    dt: np.ndarray
    lambda_smooth: float
    lambda_wd: float
    rgb_full_initial: float
    rgb_full_final: float
    runs: List[dict] = field(default_factory=list)

    def __iter__(self):
        return iter((self.poses, self.appearance, self.history))


def _refine_once(frames, model0: AppearanceModel, init: PoseSequence, cfg: RefineConfig) -> RefineResult:
    R0, t0 = init.rotation_matrices(), init.translations()
    N = len(frames)
    model = AppearanceModel(model0.points, model0.normals, model0.colors.copy())
    # appearance is optimised in 8-bit intensity levels: lr_appearance is in levels per step
    levels = model.colors * LEVELS
    rot6 = np.tile(IDENTITY_ROT6, (N, 1))
    dt = np.zeros((N, 3))
    opt = Adam([levels, rot6, dt], [cfg.lr_appearance, cfg.lr_pose, cfg.lr_pose],
               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    everything = sample_pixels(frames, None)
    rgb_initial = loss_rgb(frames, model, (R0, t0), everything)
    history = []
    for it in range(cfg.iterations):
        samples = sample_pixels(frames, cfg.samples_per_camera, rng)
        terms, g_col, g6, gdt = total_loss_and_grad(frames, model, R0, t0, rot6, dt, samples,
                                                    cfg.lambda_smooth, cfg.lambda_wd)
        if not np.isfinite(terms.total):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        history.append({"iteration": it, "L_RGB": terms.rgb, "L_t": terms.t, "L_R": terms.r,
                        "L_wd": terms.wd, "total": terms.total})
        opt.step([g_col / LEVELS, g6, gdt])
        np.clip(levels, 0.0, LEVELS, out=levels)
        model.colors = levels / LEVELS
    R, t = corrected_poses(R0, t0, rot6, dt)
    poses = PoseSequence([RigidTransform.from_rt(r, tt) for r, tt in zip(R, t)], init.valid)
    rgb_final = loss_rgb(frames, model, (R, t), everything)
    return RefineResult(poses, model, history, rot6, dt, cfg.lambda_smooth, cfg.lambda_wd,
                        rgb_initial, rgb_final)


def refine(frames: Sequence[Frame], mesh: TriangleMesh, initial_poses: PoseSequence,
           cfg: RefineConfig = RefineConfig()) -> RefineResult:
    """Optimise pose corrections and per-point appearance with Adam.

    With ``cfg.grid`` set, every (lambda_smooth, lambda_wd) pair is run and
    the run with the lowest final full-image L_rgb is returned.
    """
    if len(frames) != len(initial_poses):
        raise DataError("frames and initial poses differ in length")
    model = AppearanceModel.from_mesh(mesh, cfg.num_points, cfg.seed)
    if not cfg.grid:
        return _refine_once(frames, model, initial_poses, cfg)
    best, runs = None, []
    for ls, lw in cfg.grid:
        res = _refine_once(frames, model, initial_poses, replace(cfg, lambda_smooth=ls, lambda_wd=lw, grid=None))
        runs.append({"lambda_smooth": ls, "lambda_wd": lw, "L_RGB_final": res.rgb_full_final})
        if best is None or res.rgb_full_final < best.rgb_full_final:
            best = res
    best.runs = runs
    return best
