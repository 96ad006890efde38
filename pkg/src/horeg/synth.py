"""Synthetic ground truth: analytic meshes, smooth orbits, rasterised frames and hand rigs."""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .errors import DataError
from .geom import (CameraIntrinsics, ColoredPointCloud, PoseSequence, RigidTransform, Rotation,
                   TriangleMesh, concatenate_meshes, geodesic_angle, so3_exp)

MESH_KINDS = ("sphere", "bumpy_sphere", "box", "torus")


@dataclass(frozen=True)
class NoiseSpec:
    depth_sigma: float = 0.0           # m
    keypoint_sigma_px: float = 0.0     # px
    keypoint_sigma_3d: float = 0.0     # m, on wrist-centred joints
    pose_perturb: tuple = (0.0, 0.0)   # (deg, m)
    mask_erosion_px: int = 0

    def __post_init__(self):
        vals = (self.depth_sigma, self.keypoint_sigma_px, self.keypoint_sigma_3d,
                *self.pose_perturb, self.mask_erosion_px)
        if any(v < 0 for v in vals):
            raise DataError("noise parameters must be >= 0")


@dataclass(frozen=True, eq=False)
class SynthScene:
    mesh: TriangleMesh
    trajectory: PoseSequence
    intrinsics: CameraIntrinsics
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    # rendered into the frames but not part of the reconstruction target
    sleeve: Optional[TriangleMesh] = None


@dataclass(frozen=True, eq=False)
class RenderedFrame:
    image: np.ndarray          # (H, W, 3) in [0, 1]
    mask: np.ndarray           # (H, W) bool
    cloud: ColoredPointCloud   # camera frame, masked pixels only
    depth: np.ndarray          # (H, W), 0 where empty
    sleeve_mask: Optional[np.ndarray] = None   # pixels showing the sleeve


def default_intrinsics(width: int = 160, height: int = 120, focal: float = 200.0) -> CameraIntrinsics:
    return CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


# ------------------------------------------------------------------ meshes

def icosphere(subdivisions: int = 4):
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq].mean(axis=1)
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(f)
        ab, bc, ca = inv[:m] + len(v), inv[m:2 * m] + len(v), inv[2 * m:] + len(v)
        v = np.concatenate([v, mid])
        f = np.concatenate([np.c_[f[:, 0], ab, ca], np.c_[f[:, 1], bc, ab],
                            np.c_[f[:, 2], ca, bc], np.c_[ab, bc, ca]])
    return v, f


def procedural_colors(points: np.ndarray, scale: float, seed: int) -> np.ndarray:
    """Soft checker plus low-frequency colour noise, smooth in 3D."""
    rng = np.random.default_rng(seed + 7919)
    k = 2.0 * np.pi * 1.6 / scale
    x, y, z = (points * k).T
    checker = np.tanh(2.5 * np.sin(x) * np.sin(y) * np.sin(z))
    dark = np.array([0.15, 0.25, 0.55])
    light = np.array([0.95, 0.8, 0.3])
    col = dark + (light - dark) * (0.5 + 0.5 * checker)[:, None]
    for _ in range(3):
        freq = rng.normal(size=3) * (2.0 * np.pi * 0.6 / scale)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.08, size=3)
        col += amp * np.sin(points @ freq + phase)[:, None]
    return np.clip(col, 0.0, 1.0)


def _bumpy_radius(dirs: np.ndarray, seed: int, n_bumps: int = 10, amplitude: float = 0.12):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_bumps, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    amps = amplitude * rng.uniform(0.5, 1.0, size=n_bumps) * rng.choice([-1.0, 1.0], size=n_bumps)
    widths = rng.uniform(0.25, 0.45, size=n_bumps)
    cosang = dirs @ centers.T
    return 1.0 + np.sum(amps * np.exp(-(1.0 - cosang) / widths**2), axis=1)


def _box(scale: float, n: int = 8):
    verts, faces, normals = [], [], []
    g = np.linspace(-scale, scale, n + 1)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    quad = np.c_[idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()]
    for axis in range(3):
        for sign in (-1.0, 1.0):
            a, b = [k for k in range(3) if k != axis]
            p = np.zeros((len(uu), 3))
            p[:, axis] = sign * scale
            p[:, a], p[:, b] = uu, vv
            nrm = np.zeros(3)
            nrm[axis] = sign
            tri = np.concatenate([quad[:, [0, 1, 2]], quad[:, [0, 2, 3]]])
            # orient counter-clockwise seen from outside
            e = np.cross(p[tri[0, 1]] - p[tri[0, 0]], p[tri[0, 2]] - p[tri[0, 0]])
            if e @ nrm < 0:
                tri = tri[:, ::-1]
            faces.append(tri + sum(len(v) for v in verts))
            verts.append(p)
            normals.append(np.tile(nrm, (len(p), 1)))
    return np.concatenate(verts), np.concatenate(faces), np.concatenate(normals)


def _torus(scale: float, nu: int = 64, nv: int = 32, minor: float = 0.35):
    R, r = scale, minor * scale
    u = np.linspace(0, 2 * np.pi, nu, endpoint=False)
    v = np.linspace(0, 2 * np.pi, nv, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    pts = np.c_[(R + r * np.cos(vv)) * np.cos(uu), (R + r * np.cos(vv)) * np.sin(uu), r * np.sin(vv)]
    nrm = np.c_[np.cos(vv) * np.cos(uu), np.cos(vv) * np.sin(uu), np.sin(vv)]
    i, j = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a = i * nv + j
    b = ((i + 1) % nu) * nv + j
    c = ((i + 1) % nu) * nv + (j + 1) % nv
    d = i * nv + (j + 1) % nv
    faces = np.concatenate([np.c_[a, b, c], np.c_[a, c, d]])
    return pts, faces, nrm


def make_mesh(kind: str, scale: float = 0.1, seed: int = 0, subdivisions: int = 4) -> TriangleMesh:
    """Analytic test shape with procedural vertex colours.

    ``scale`` is the radius for spheres, the half side for the box and the
    major radius for the torus.
    """
    if kind == "sphere":
        v, f = icosphere(subdivisions)
        normals = v.copy()
        v = v * scale
    elif kind == "bumpy_sphere":
        d, f = icosphere(subdivisions)
        v = d * (scale * _bumpy_radius(d, seed))[:, None]
        normals = None
    elif kind == "box":
        v, f, normals = _box(scale)
    elif kind == "torus":
        v, f, normals = _torus(scale)
    else:
        raise DataError(f"unknown mesh kind {kind!r}; expected one of {MESH_KINDS}")
    mesh = TriangleMesh(v, f, procedural_colors(v, scale, seed), normals)
    return mesh.with_normals()


# ------------------------------------------------------------ trajectories

def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), roll: float = 0.0) -> RigidTransform:
    """camera_from_world pose of a camera at ``center`` whose optical axis hits ``target``."""
    c = np.asarray(center, float)
    fwd = np.asarray(target, float) - c
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    if roll:
        R = so3_exp([0.0, 0.0, roll]).as_matrix() @ R
    return RigidTransform.from_rt(R, -R @ c)


def orbit_cameras(n: int, radius: float, elevations_deg=(0.0,), azimuth_span_deg: float = 360.0) -> PoseSequence:
    """Cameras evenly spread in azimuth, cycling through the given elevations."""
    poses = []
    for i in range(n):
        az = np.deg2rad(azimuth_span_deg * i / n)
        el = np.deg2rad(elevations_deg[i % len(elevations_deg)])
        c = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(c))
    return PoseSequence(poses)


def make_trajectory(n_frames: int, orbit_radius: float = 0.45, seed: int = 0,
                    azimuth_span_deg: float = 270.0) -> PoseSequence:
    """Smooth orbit around the origin with a band-limited wobble.

    Per-frame steps stay below 5 degrees and 2 cm by construction.
    """
    if n_frames < 1:
        raise DataError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    i = np.arange(n_frames, dtype=float)
    span = max(n_frames - 1, 1)
    step = min(azimuth_span_deg / span, 4.0)
    az = np.deg2rad(rng.uniform(0, 360) + step * i)
    el_amp = min(15.0, 1.5 * span / (2 * np.pi))
    el = np.deg2rad(el_amp * np.sin(2 * np.pi * i / span + rng.uniform(0, 2 * np.pi)))

    # short sequences get proportionally smaller wobble so steps stay bounded
    damp = min(1.0, (span + 1) / 16.0)

    def wobble(amp):
        amp = amp * damp
        out = np.zeros(n_frames)
        for k in (1, 2):
            out += amp / k * np.sin(2 * np.pi * k * i / (span + 1) + rng.uniform(0, 2 * np.pi))
        return out

    off = np.stack([wobble(0.004), wobble(0.004), wobble(0.004)], axis=1)
    rad = orbit_radius + wobble(0.005)
    roll = np.deg2rad(wobble(1.0))
    poses = []
    for k in range(n_frames):
        c = rad[k] * np.array([np.cos(el[k]) * np.cos(az[k]), np.cos(el[k]) * np.sin(az[k]), np.sin(el[k])])
        poses.append(look_at(c, off[k], roll=roll[k]))
    return PoseSequence(poses)


def trajectory_steps(seq: PoseSequence):
    """Per-step (rotation degrees, translation metres) between consecutive poses."""
    rot = [np.rad2deg(geodesic_angle(a.rotation, b.rotation)) for a, b in zip(seq.poses, seq.poses[1:])]
    tr = [np.linalg.norm(a.t - b.t) for a, b in zip(seq.poses, seq.poses[1:])]
    return np.array(rot), np.array(tr)


def perturb_poses(seq: PoseSequence, deg: float, meters: float, seed: int = 0) -> PoseSequence:
    """Independent per-frame perturbation: a rotation of exactly ``deg`` about a random
    axis through the world origin (right-multiplied) and a translation offset of
    norm ``meters``."""
    rng = np.random.default_rng(seed)
    out = []
    for p in seq.poses:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        dR = so3_exp(axis * np.deg2rad(deg))
        out.append(RigidTransform(p.rotation * dR, p.t + meters * d))
    return PoseSequence(out, seq.valid, seq.residuals)


# --------------------------------------------------------------- rendering

def rasterize(mesh: TriangleMesh, pose: RigidTransform, K: CameraIntrinsics, near: float = 1e-3):
    """Z-buffered triangle rasterisation sampled at pixel centres.

    Returns (face index map, -1 when empty; barycentric map; camera-frame
    surface points). Hits are exact ray-plane intersections.
    """
    H, W = K.height, K.width
    vc = pose.apply(mesh.vertices)
    tri = vc[mesh.faces]
    ok = np.all(tri[:, :, 2] > near, axis=1)
    fids = np.flatnonzero(ok)
    tri = tri[ok]
    uv = K.project(tri.reshape(-1, 3)).reshape(-1, 3, 2)
    x0 = np.clip(np.ceil(uv[:, :, 0].min(1)), 0, W).astype(np.int64)
    x1 = np.clip(np.floor(uv[:, :, 0].max(1)), -1, W - 1).astype(np.int64)
    y0 = np.clip(np.ceil(uv[:, :, 1].min(1)), 0, H).astype(np.int64)
    y1 = np.clip(np.floor(uv[:, :, 1].max(1)), -1, H - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    cnt = nx * ny
    face_idx = np.full((H, W), -1, np.int64)
    bary_map = np.zeros((H, W, 3))
    pts_map = np.zeros((H, W, 3))
    if cnt.sum() == 0:
        return face_idx, bary_map, pts_map
    f = np.repeat(np.arange(len(tri)), cnt)
    local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    px = x0[f] + local % nx[f]
    py = y0[f] + local // nx[f]

    rays = np.c_[(px - K.cx) / K.fx, (py - K.cy) / K.fy, np.ones(len(px))]
    a, b, c = tri[f, 0], tri[f, 1], tri[f, 2]
    n = np.cross(b - a, c - a)
    denom = np.einsum("ij,ij->i", n, rays)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.einsum("ij,ij->i", n, a) / denom
    X = rays * s[:, None]
    # barycentrics from signed sub-areas along the face normal
    nn = np.einsum("ij,ij->i", n, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        wa = np.einsum("ij,ij->i", np.cross(b - X, c - X), n) / nn
        wb = np.einsum("ij,ij->i", np.cross(c - X, a - X), n) / nn
    wc = 1.0 - wa - wb
    inside = (np.abs(denom) > 1e-15) & (s > near) & (wa >= -1e-12) & (wb >= -1e-12) & (wc >= -1e-12)
    f, px, py, X, s = f[inside], px[inside], py[inside], X[inside], s[inside]
    bary = np.c_[wa[inside], wb[inside], wc[inside]]
    pix = py * W + px
    order = np.lexsort((f, s, pix))
    pix_s = pix[order]
    first = order[np.r_[True, pix_s[1:] != pix_s[:-1]]]
    yy, xx = py[first], px[first]
    face_idx[yy, xx] = fids[f[first]]
    bary_map[yy, xx] = np.clip(bary[first], 0.0, 1.0)
    pts_map[yy, xx] = X[first]
    return face_idx, bary_map, pts_map


def render_frame(mesh: TriangleMesh, pose: RigidTransform, K: CameraIntrinsics,
                 noise: NoiseSpec = NoiseSpec(), rng: Optional[np.random.Generator] = None) -> RenderedFrame:
    face_idx, bary, pts = rasterize(mesh, pose, K)
    mask = face_idx >= 0
    image = np.zeros((K.height, K.width, 3))
    yy, xx = np.nonzero(mask)
    fv = mesh.faces[face_idx[yy, xx]]
    b = bary[yy, xx]
    if mesh.vertex_colors is not None:
        image[yy, xx] = np.einsum("nk,nkd->nd", b, mesh.vertex_colors[fv])
    else:
        image[yy, xx] = 0.5
    normals = np.einsum("nk,nkd->nd", b, mesh.normals()[fv]) @ pose.R.T
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    positions = pts[yy, xx]
    depth = np.zeros((K.height, K.width))
    depth[yy, xx] = positions[:, 2]

    if noise.mask_erosion_px > 0:
        mask = ndimage.binary_erosion(mask, iterations=int(noise.mask_erosion_px))
    if noise.depth_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        z = positions[:, 2]
        positions = positions * ((z + rng.normal(0.0, noise.depth_sigma, len(z))) / z)[:, None]
    keep = mask[yy, xx]
    cloud = ColoredPointCloud(positions[keep], normals[keep], image[yy, xx][keep], np.c_[xx, yy][keep])
    return RenderedFrame(np.clip(image, 0.0, 1.0), mask, cloud, depth)


def sphere_silhouette(radius: float, pose: RigidTransform, K: CameraIntrinsics, center=(0.0, 0.0, 0.0)):
    """Exact silhouette: pixels whose centre ray meets the sphere."""
    c = pose.apply(np.asarray(center, float)[None])[0]
    d = K.pixel_rays()
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    along = d @ c
    return (along > 0) & (c @ c - along**2 <= radius**2)


SLEEVE_COLOR = (0.1, 0.85, 0.2)


def make_sleeve(scale: float = 0.1, color=SLEEVE_COLOR, length: float = 2.5, radius: float = 0.35,
                n: int = 32) -> TriangleMesh:
    """Uniformly coloured open cylinder hanging below the object, standing in for an arm."""
    z0, z1 = -0.85 * scale, -(0.85 + length) * scale
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    ring = np.c_[radius * scale * np.cos(ang), radius * scale * np.sin(ang)]
    v = np.concatenate([np.c_[ring, np.full(n, z0)], np.c_[ring, np.full(n, z1)]])
    i = np.arange(n)
    j = (i + 1) % n
    faces = np.concatenate([np.c_[i, i + n, j + n], np.c_[i, j + n, j]])
    normals = np.c_[np.cos(ang), np.sin(ang), np.zeros(n)]
    return TriangleMesh(v, faces, np.tile(color, (2 * n, 1)), np.concatenate([normals, normals]))


def render(scene: SynthScene) -> List[RenderedFrame]:
    rng = np.random.default_rng(scene.seed)
    if scene.sleeve is None:
        return [render_frame(scene.mesh, pose, scene.intrinsics, scene.noise, rng)
                for pose in scene.trajectory.poses]
    both = concatenate_meshes([scene.mesh, scene.sleeve])
    out = []
    for pose in scene.trajectory.poses:
        fr = render_frame(both, pose, scene.intrinsics, scene.noise, rng)
        face_idx, _, _ = rasterize(both, pose, scene.intrinsics)
        out.append(RenderedFrame(fr.image, fr.mask, fr.cloud, fr.depth, face_idx >= scene.mesh.n_faces))
    return out


def make_scene(kind: str = "bumpy_sphere", n_frames: int = 64, seed: int = 0, scale: float = 0.1,
               orbit_radius: float = 0.45, intrinsics: Optional[CameraIntrinsics] = None,
               noise: NoiseSpec = NoiseSpec(), subdivisions: int = 4, sleeve: bool = False) -> SynthScene:
    return SynthScene(make_mesh(kind, scale, seed, subdivisions),
                      make_trajectory(n_frames, orbit_radius, seed),
                      intrinsics or default_intrinsics(), noise, seed,
                      make_sleeve(scale) if sleeve else None)


# --------------------------------------------------------------- hand rig

N_JOINTS = 21


@dataclass(frozen=True, eq=False)
class HandRig:
    """Rigid 21-joint constellation, wrist at the origin (metres)."""

    joints: np.ndarray

    def project(self, pose: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
        return K.project(pose.apply(self.joints))


def make_hand_rig(seed: int = 0) -> HandRig:
    """Wrist, then four joints per finger from thumb to little finger."""
    rng = np.random.default_rng(seed)
    joints = [np.zeros(3)]
    spreads = np.deg2rad([-50.0, -18.0, 0.0, 16.0, 32.0])
    lengths = np.array([[0.035, 0.032, 0.025, 0.022], [0.075, 0.040, 0.024, 0.020],
                        [0.072, 0.044, 0.028, 0.022], [0.068, 0.040, 0.026, 0.021],
                        [0.062, 0.032, 0.020, 0.018]])
    curls = np.deg2rad([[20, 25, 20, 15], [5, 30, 35, 25], [5, 35, 40, 25], [5, 40, 40, 25], [5, 45, 40, 25]])
    for k in range(5):
        heading = np.array([np.sin(spreads[k]), np.cos(spreads[k]), 0.0])
        side = np.array([np.cos(spreads[k]), -np.sin(spreads[k]), 0.0])
        pos = np.zeros(3)
        pitch = 0.0
        if k == 0:
            pos = np.array([-0.02, 0.01, -0.01])
        for j in range(4):
            pitch += curls[k, j] + rng.normal(0.0, np.deg2rad(3.0))
            d = np.cos(pitch) * heading - np.sin(pitch) * np.array([0.0, 0.0, 1.0])
            if k == 0:
                d = 0.7 * d + 0.3 * side * -1.0
                d /= np.linalg.norm(d)
            pos = pos + lengths[k, j] * (1.0 + rng.normal(0.0, 0.05)) * d
            joints.append(pos.copy())
    return HandRig(np.array(joints))
