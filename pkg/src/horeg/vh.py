"""Robust visual hull by silhouette voting, followed by marching cubes.

Every voxel centre is projected into each valid camera; a camera votes for
the voxel when the projection lands inside its silhouette. With ``misses``
the number of valid cameras that do not vote:

    misses <= alpha           occupied
    alpha < misses <= beta    uncertain, filled when 6-adjacent to an occupied voxel
    misses > beta             empty

The fill is a single pass against the strictly occupied set.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage.measure import marching_cubes

from .errors import DataError, DegenerateField, EmptyBounds, HoregError, NoValidFrames
from .geom import CameraIntrinsics, PoseSequence, TriangleMesh

Bounds = Tuple[Tuple[float, float, float], Tuple[float, float, float]]


@dataclass(frozen=True)
class VhConfig:
    resolution: int = 128
    alpha: Optional[int] = None    # default ceil(N / 8)
    beta: Optional[int] = None     # default ceil(N / 4)
    bounds: Optional[Bounds] = None
    coarse_resolution: int = 48
    padding: float = 0.05

    def __post_init__(self):
        if self.resolution < 16:
            raise DataError("resolution must be >= 16")
        if self.bounds is not None:
            lo, hi = np.asarray(self.bounds, float)
            if np.any(hi <= lo):
                raise EmptyBounds("bounds must have positive extent")

    def thresholds(self, n: int) -> Tuple[int, int]:
        a = int(np.ceil(n / 8)) if self.alpha is None else int(self.alpha)
        b = int(np.ceil(n / 4)) if self.beta is None else int(self.beta)
        if not 0 < a <= b <= n:
            raise DataError(f"need 0 < alpha <= beta <= N, got alpha={a}, beta={b}, N={n}")
        return a, b


@dataclass(eq=False)
class VoxelGrid:
    votes: np.ndarray       # (r, r, r) int, indexed [ix, iy, iz]
    n_views: int
    alpha: int
    beta: int
    origin: np.ndarray      # centre of voxel (0, 0, 0)
    spacing: np.ndarray     # (3,)

    @property
    def misses(self) -> np.ndarray:
        return self.n_views - self.votes

    @property
    def occupied(self) -> np.ndarray:
        return self.misses <= self.alpha

    @property
    def uncertain(self) -> np.ndarray:
        m = self.misses
        return (m > self.alpha) & (m <= self.beta)

    @property
    def occupancy(self) -> np.ndarray:
        occ = self.occupied
        near = ndimage.binary_dilation(occ, structure=ndimage.generate_binary_structure(3, 1))
        return occ | (self.uncertain & near)

    def centers(self) -> np.ndarray:
        r = self.votes.shape
        axes = [self.origin[k] + self.spacing[k] * np.arange(r[k]) for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def world_to_index(self, pts) -> np.ndarray:
        return np.rint((np.asarray(pts, float) - self.origin) / self.spacing).astype(np.int64)


def _count_votes(centers, masks, poses, K: CameraIntrinsics):
    votes = np.zeros(len(centers), np.int32)
    for mask, pose in zip(masks, poses):
        Xc = centers @ pose.R.T + pose.t
        z = Xc[:, 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        px = np.rint(K.fx * Xc[:, 0] / zs + K.cx)
        py = np.rint(K.fy * Xc[:, 1] / zs + K.cy)
        inside = front & (px >= 0) & (px < K.width) & (py >= 0) & (py < K.height)
        hit = np.zeros(len(centers), bool)
        hit[inside] = mask[py[inside].astype(np.int64), px[inside].astype(np.int64)]
        votes += hit
    return votes


def _grid(bounds, res):
    lo, hi = np.asarray(bounds, float)
    spacing = (hi - lo) / res
    origin = lo + 0.5 * spacing
    axes = [origin[k] + spacing[k] * np.arange(res) for k in range(3)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return origin, spacing, centers


def _valid_views(silhouettes, poses: PoseSequence):
    if len(silhouettes) != len(poses):
        raise DataError("silhouettes and poses must be index-aligned")
    idx = [i for i in range(len(poses)) if poses.valid[i]]
    if len(idx) < 3:
        raise NoValidFrames(f"visual hull needs >= 3 valid frames, got {len(idx)}")
    return [np.asarray(silhouettes[i], bool) for i in idx], [poses.poses[i] for i in idx]


def _axes_focus(C, d):
    """Least-squares point closest to the lines C_i + s d_i."""
    P = np.eye(3)[None] - d[:, :, None] * d[:, None, :]
    A, b = P.sum(axis=0), np.einsum("nij,nj->i", P, C)
    if np.linalg.cond(A) > 1e8:
        return C.mean(axis=0)
    return np.linalg.solve(A, b)


def auto_bounds(silhouettes, poses: PoseSequence, K: CameraIntrinsics, cfg: VhConfig = VhConfig()) -> Bounds:
    """Box around the silhouette-consistent region, padded by ``cfg.padding``.

    The region is found by carving a coarse cube that encloses every camera
    centre and the point nearest all optical axes, using the uncertain
    threshold so the box errs on the large side.
    """
    masks, views = _valid_views(silhouettes, poses)
    C = np.stack([p.camera_center() for p in views])
    pts = np.vstack([C, _axes_focus(C, np.stack([p.R[2] for p in views]))])
    mid = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    half = max(np.linalg.norm(pts - mid, axis=1).max(), 1e-3)
    res = cfg.coarse_resolution
    _, beta = cfg.thresholds(len(views))
    origin, spacing, centers = _grid((mid - half, mid + half), res)
    keep = (len(views) - _count_votes(centers, masks, views, K)) <= beta
    if not np.any(keep):
        raise EmptyBounds("no region is consistent with the silhouettes")
    pts = centers[keep]
    lo = pts.min(axis=0) - spacing
    hi = pts.max(axis=0) + spacing
    pad = cfg.padding * (hi - lo)
    return tuple(lo - pad), tuple(hi + pad)


def carve(silhouettes: Sequence[np.ndarray], poses: PoseSequence, K: CameraIntrinsics,
          cfg: VhConfig = VhConfig()) -> VoxelGrid:
    masks, views = _valid_views(silhouettes, poses)
    alpha, beta = cfg.thresholds(len(views))
    bounds = cfg.bounds if cfg.bounds is not None else auto_bounds(silhouettes, poses, K, cfg)
    r = cfg.resolution
    origin, spacing, centers = _grid(bounds, r)
    votes = _count_votes(centers, masks, views, K).reshape(r, r, r)
    return VoxelGrid(votes, len(views), alpha, beta, origin, spacing)


def extract_mesh(grid: VoxelGrid) -> TriangleMesh:
    """Marching cubes on the vote field at the occupied/empty boundary.

    Filled uncertain voxels are lifted just above the iso-level so the surface
    encloses exactly the occupancy; elsewhere vertices interpolate votes.
    """
    occ = grid.occupancy
    if occ.all() or not occ.any():
        raise DegenerateField("occupancy is uniform; no surface to extract")
    level = grid.n_views - grid.alpha - 0.5
    f = grid.votes.astype(float)
    f[occ] = np.maximum(f[occ], level + 0.5)
    f[~occ] = np.minimum(f[~occ], level - 0.5)
    f = np.pad(f, 1, constant_values=min(0.0, level - 1.0))
    verts, faces, _, _ = marching_cubes(f, level, spacing=tuple(grid.spacing), allow_degenerate=False)
    verts = verts + (grid.origin - grid.spacing)
    # skimage winds faces clockwise seen from the low-value (outside) side
    faces = faces[:, ::-1]
    mesh = TriangleMesh(verts, faces, allow_degenerate=True)
    good = mesh.face_areas() > 1e-12 * float(np.prod(grid.spacing)) ** (2 / 3)
    return _compact(TriangleMesh(verts, faces[good], allow_degenerate=True)).with_normals()


def _compact(mesh: TriangleMesh) -> TriangleMesh:
    used = np.unique(mesh.faces)
    remap = np.full(len(mesh.vertices), -1, np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[mesh.faces])


@dataclass(eq=False)
class VhResult:
    mesh: Optional[TriangleMesh]
    success: bool
    grid: Optional[VoxelGrid] = None
    message: str = ""


def reconstruct(silhouettes, poses: PoseSequence, K: CameraIntrinsics, cfg: VhConfig = VhConfig()) -> VhResult:
    """Carve then extract; failures are recorded rather than raised."""
    try:
        grid = carve(silhouettes, poses, K, cfg)
        return VhResult(extract_mesh(grid), True, grid)
    except HoregError as e:
        return VhResult(None, False, None, f"{type(e).__name__}: {e}")
