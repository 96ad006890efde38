"""Rotation, rigid and similarity transforms, cameras, point clouds and meshes.

Rotations are stored as unit quaternions (w, x, y, z) with w >= 0; matrices are
built on demand. Poses follow the camera_from_world convention throughout:
``x_cam = R @ x_world + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DegenerateParam, EmptyMesh

_ROT6_MIN_NORM = 1e-9
_ROT6_MIN_SIN = np.sin(1e-6)


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    # renormalising an already-unit quaternion can flip low bits; skip it
    if abs(n - 1.0) > 1e-15:
        q = q / n
    if q[0] < 0 or (q[0] == 0 and q[np.flatnonzero(q)[0]] < 0):
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Batched unit quaternion -> rotation matrix, shape (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; the input is projected onto SO(3) first."""
    m = np.asarray(m, dtype=float)
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    m = u @ np.diag([1.0, 1.0, d]) @ vt
    tr = np.trace(m)
    diag = np.diag(m)
    k = int(np.argmax(np.r_[tr, diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return _canonical_quat(np.array(q))


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class Rotation:
    quat: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float)
        if q.shape != (4,) or not np.all(np.isfinite(q)) or np.linalg.norm(q) == 0:
            raise DataError(f"invalid quaternion {q!r}")
        object.__setattr__(self, "quat", _frozen(_canonical_quat(q)))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        return cls(matrix_to_quat(m))

    @classmethod
    def from_rotvec(cls, v) -> "Rotation":
        return so3_exp(v)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        return so3_exp(axis / np.linalg.norm(axis) * angle)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Rotation":
        return cls(rng.normal(size=4))

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def as_rotvec(self) -> np.ndarray:
        return so3_log(self)

    def inverse(self) -> "Rotation":
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.quat, other.quat))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.as_matrix().T

    def __repr__(self):
        return f"Rotation(quat={self.quat.tolist()})"


def geodesic_angle(a: Rotation, b: Rotation) -> float:
    """Angle in radians of the relative rotation a^-1 b, in [0, pi]."""
    rel = quat_multiply((a.inverse()).quat, b.quat)
    return float(2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0])))


def so3_exp(v) -> Rotation:
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        # second-order series keeps exp(log(r)) accurate near identity
        return Rotation(np.r_[1.0 - theta**2 / 8.0, 0.5 * v])
    return Rotation(np.r_[np.cos(theta / 2), np.sin(theta / 2) * v / theta])


def so3_log(r: Rotation) -> np.ndarray:
    w, *xyz = r.quat
    xyz = np.array(xyz)
    s = np.linalg.norm(xyz)
    if s < 1e-12:
        return 2.0 * xyz / max(w, 1e-300)
    theta = 2.0 * np.arctan2(s, w)
    if w == 0.0:
        # angle pi: axis taken from the largest quaternion component
        k = int(np.argmax(np.abs(xyz)))
        axis = xyz * np.sign(xyz[k]) / s
        return axis * np.pi
    return xyz / s * theta


# ---------------------------------------------------------------- transforms

@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (3,):
            raise DataError("translation must be a 3-vector")
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> "RigidTransform":
        return cls(Rotation.from_matrix(R), t)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.rotation * other.rotation,
                              self.rotation.apply(other.translation) + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        inv = self.rotation.inverse()
        return RigidTransform(inv, -inv.apply(self.translation))

    def apply(self, points) -> np.ndarray:
        return self.rotation.apply(points) + self.translation

    def camera_center(self) -> np.ndarray:
        return -self.rotation.inverse().apply(self.translation)

    def __repr__(self):
        return f"RigidTransform(quat={self.rotation.quat.tolist()}, t={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float = 1.0
    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise DataError(f"similarity scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (3,):
            raise DataError("translation must be a 3-vector")
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation * other.rotation,
            self.scale * self.rotation.apply(other.translation) + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "SimilarityTransform":
        inv = self.rotation.inverse()
        return SimilarityTransform(1.0 / self.scale, inv, -inv.apply(self.translation) / self.scale)

    def apply(self, points) -> np.ndarray:
        return self.scale * self.rotation.apply(points) + self.translation

    def rigid(self) -> RigidTransform:
        return RigidTransform(self.rotation, self.translation)

    def __repr__(self):
        return (f"SimilarityTransform(scale={self.scale!r}, quat={self.rotation.quat.tolist()}, "
                f"t={self.translation.tolist()})")


# ------------------------------------------------------------ 6D rotations

IDENTITY_ROT6 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True, eq=False)
class SixDofParam:
    """Rotation correction as two 3-vector rows of a 2x3 matrix, plus a translation."""

    rot6: np.ndarray = field(default_factory=lambda: IDENTITY_ROT6.copy())
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rot6, dtype=float).reshape(-1)
        t = np.asarray(self.trans, dtype=float).reshape(-1)
        if r.shape != (6,) or t.shape != (3,):
            raise DataError("SixDofParam needs 6 rotation and 3 translation numbers")
        object.__setattr__(self, "rot6", _frozen(r))
        object.__setattr__(self, "trans", _frozen(t))

    @classmethod
    def identity(cls) -> "SixDofParam":
        return cls()

    @classmethod
    def from_rotation(cls, r: Rotation, trans=(0.0, 0.0, 0.0)) -> "SixDofParam":
        return cls(r.as_matrix()[:2].reshape(-1), trans)


def orth_matrix(rot6) -> np.ndarray:
    """Gram-Schmidt of the two rows; returns the matrix with rows e1, e2, e1 x e2."""
    rot6 = np.asarray(rot6, dtype=float)
    v1, v2 = rot6[:3], rot6[3:]
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 < _ROT6_MIN_NORM or n2 < _ROT6_MIN_NORM:
        raise DegenerateParam("6D rotation vector with near-zero norm")
    if np.linalg.norm(np.cross(v1, v2)) < _ROT6_MIN_SIN * n1 * n2:
        raise DegenerateParam("6D rotation vectors are parallel")
    e1 = v1 / n1
    u = v2 - (e1 @ v2) * e1
    e2 = u / np.linalg.norm(u)
    return np.stack([e1, e2, np.cross(e1, e2)])


def orth(p) -> Rotation:
    rot6 = p.rot6 if isinstance(p, SixDofParam) else p
    return Rotation.from_matrix(orth_matrix(rot6))


def orth_jacobian(rot6) -> np.ndarray:
    """d orth_matrix / d rot6 as an array of shape (3, 3, 6)."""
    rot6 = np.asarray(rot6, dtype=float)
    v1, v2 = rot6[:3], rot6[3:]
    n1 = np.linalg.norm(v1)
    e1 = v1 / n1
    a = e1 @ v2
    u = v2 - a * e1
    nu = np.linalg.norm(u)
    e2 = u / nu
    I = np.eye(3)
    de1_dv1 = (I - np.outer(e1, e1)) / n1
    du_de1 = -(a * I + np.outer(e1, v2))
    du_dv2 = I - np.outer(e1, e1)
    de2_du = (I - np.outer(e2, e2)) / nu
    de2_dv1 = de2_du @ du_de1 @ de1_dv1
    de2_dv2 = de2_du @ du_dv2
    # d(e1 x e2) = de1 x e2 + e1 x de2
    de3_dv1 = -skew(e2) @ de1_dv1 + skew(e1) @ de2_dv1
    de3_dv2 = skew(e1) @ de2_dv2
    J = np.zeros((3, 3, 6))
    J[0, :, :3] = de1_dv1
    J[1, :, :3] = de2_dv1
    J[1, :, 3:] = de2_dv2
    J[2, :, :3] = de3_dv1
    J[2, :, 3:] = de3_dv2
    return J


# ------------------------------------------------------------------ camera

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points_cam) -> np.ndarray:
        p = np.asarray(points_cam, dtype=float)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1)

    def pixel_rays(self) -> np.ndarray:
        """Unit-depth rays through every pixel centre, shape (H, W, 3)."""
        xs, ys = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs, float)], -1)


# ------------------------------------------------------ clouds and meshes

def _unit_rows_ok(n: np.ndarray, tol: float) -> bool:
    return bool(np.all(np.abs(np.linalg.norm(n, axis=1) - 1.0) <= tol))


@dataclass(frozen=True, eq=False)
class ColoredPointCloud:
    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    # integer (x, y) pixel of origin for clouds back-projected from depth
    pixels: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "positions", _frozen(pos))
        n = len(pos)
        for name in ("normals", "colors", "pixels"):
            a = getattr(self, name)
            if a is None:
                continue
            a = np.asarray(a, dtype=np.int64 if name == "pixels" else float)
            a = a.reshape(-1, 2 if name == "pixels" else 3)
            if len(a) != n:
                raise DataError(f"{name} length {len(a)} != {n} positions")
            object.__setattr__(self, name, _frozen(a, a.dtype))
        if self.normals is not None and not _unit_rows_ok(self.normals, 1e-6):
            raise DataError("point normals must be unit length")

    def __len__(self):
        return len(self.positions)

    def subset(self, idx) -> "ColoredPointCloud":
        pick = lambda a: None if a is None else a[idx]
        return ColoredPointCloud(self.positions[idx], pick(self.normals), pick(self.colors), pick(self.pixels))

    def transformed(self, T: RigidTransform) -> "ColoredPointCloud":
        normals = None if self.normals is None else T.rotation.apply(self.normals)
        return ColoredPointCloud(T.apply(self.positions), normals, self.colors, self.pixels)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: Optional[np.ndarray] = None
    vertex_normals: Optional[np.ndarray] = None
    allow_degenerate: bool = False

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise DataError("face index out of range")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f, np.int64))
        if not self.allow_degenerate and len(f):
            if np.any(self.face_areas() <= 1e-12):
                raise DataError("mesh contains zero-area faces")
        for name in ("vertex_colors", "vertex_normals"):
            a = getattr(self, name)
            if a is None:
                continue
            a = np.asarray(a, dtype=float).reshape(-1, 3)
            if len(a) != len(v):
                raise DataError(f"{name} length mismatch")
            object.__setattr__(self, name, _frozen(a))

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_cross(self) -> np.ndarray:
        tri = self.triangles()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        return c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-300)

    def area_weighted_normals(self) -> np.ndarray:
        n = np.zeros_like(self.vertices)
        c = self.face_cross()
        for k in range(3):
            np.add.at(n, self.faces[:, k], c)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), np.array([0.0, 0.0, 1.0]))
        return n

    def normals(self) -> np.ndarray:
        """Vertex normals, computed from faces when the mesh carries none."""
        if self.vertex_normals is not None:
            return self.vertex_normals
        return self.area_weighted_normals()

    def with_normals(self) -> "TriangleMesh":
        if self.vertex_normals is not None:
            return self
        return TriangleMesh(self.vertices, self.faces, self.vertex_colors,
                            self.area_weighted_normals(), self.allow_degenerate)

    def transformed(self, T) -> "TriangleMesh":
        normals = None if self.vertex_normals is None else T.rotation.apply(self.vertex_normals)
        return TriangleMesh(T.apply(self.vertices), self.faces, self.vertex_colors, normals,
                            allow_degenerate=True)

    def submesh(self, face_mask) -> "TriangleMesh":
        faces = self.faces[face_mask]
        used = np.unique(faces)
        remap = -np.ones(len(self.vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        pick = lambda a: None if a is None else a[used]
        return TriangleMesh(self.vertices[used], remap[faces], pick(self.vertex_colors),
                            pick(self.vertex_normals), self.allow_degenerate)


def concatenate_meshes(meshes: Sequence[TriangleMesh]) -> TriangleMesh:
    verts, faces, colors, normals = [], [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
        colors.append(m.vertex_colors)
        normals.append(m.normals())
    col = None if any(c is None for c in colors) else np.concatenate(colors)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), col, np.concatenate(normals),
                        allow_degenerate=any(m.allow_degenerate for m in meshes))


def barycentric_normals(mesh: TriangleMesh, face_idx, bary) -> np.ndarray:
    """Vertex normals interpolated at barycentric coordinates, renormalised."""
    vn = mesh.normals()[mesh.faces[face_idx]]
    n = np.einsum("nk,nkd->nd", bary, vn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    fn = mesh.face_normals()[face_idx]
    return np.where(norm > 1e-12, n / np.where(norm > 1e-12, norm, 1.0), fn)


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0, return_index: bool = False):
    """Area-uniform surface samples.

    With ``return_index`` also returns the face index and barycentric
    coordinates of every sample.
    """
    if mesh.n_faces == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    if n == 0:
        pts = np.zeros((0, 3))
        return (pts, np.zeros(0, np.int64), np.zeros((0, 3))) if return_index else pts
    areas = mesh.face_areas()
    cdf = np.cumsum(areas)
    face = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    face = np.minimum(face, mesh.n_faces - 1)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    pts = np.einsum("nk,nkd->nd", bary, mesh.triangles()[face])
    if return_index:
        return pts, face, bary
    return pts


# ------------------------------------------------------------- sequences

@dataclass(eq=False)
class PoseSequence:
    """Per-frame camera_from_world transforms with validity flags."""

    poses: list
    valid: np.ndarray = None
    residuals: np.ndarray = None

    def __post_init__(self):
        n = len(self.poses)
        self.valid = np.ones(n, bool) if self.valid is None else np.asarray(self.valid, bool).copy()
        self.residuals = (np.full(n, np.nan) if self.residuals is None
                          else np.asarray(self.residuals, float).copy())
        if len(self.valid) != n or len(self.residuals) != n:
            raise DataError("pose sequence arrays must share one length")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i) -> RigidTransform:
        return self.poses[i]

    def rotation_matrices(self) -> np.ndarray:
        return np.stack([p.R for p in self.poses]) if self.poses else np.zeros((0, 3, 3))

    def translations(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses]) if self.poses else np.zeros((0, 3))

    def camera_centers(self) -> np.ndarray:
        return np.stack([p.camera_center() for p in self.poses]) if self.poses else np.zeros((0, 3))

    @classmethod
    def from_arrays(cls, R, t, valid=None, residuals=None) -> "PoseSequence":
        return cls([RigidTransform.from_rt(r, tt) for r, tt in zip(R, t)], valid, residuals)
