"""Exact point-to-triangle-mesh queries and the normal-augmented mesh distance."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..errors import EmptyMesh
from ..geom import TriangleMesh, barycentric_normals


def closest_point_on_triangles(p, a, b, c):
    """Closest point on triangles (a, b, c) to p, all arrays (n, 3).

    Returns (points, barycentric (n, 3)). Region tests follow Ericson's
    Voronoi-region classification.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_c = (d6 >= 0) & (d5 <= d6)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom

    n = len(p)
    bary = np.empty((n, 3))
    bary[:] = np.c_[1.0 - v_in - w_in, v_in, w_in]
    # apply regions in reverse priority so the first matching test wins
    for mask, val in (
        (in_bc, np.c_[np.zeros(n), 1.0 - t_bc, t_bc]),
        (in_ac, np.c_[1.0 - t_ac, np.zeros(n), t_ac]),
        (in_c, np.tile([0.0, 0.0, 1.0], (n, 1))),
        (in_ab, np.c_[1.0 - t_ab, t_ab, np.zeros(n)]),
        (in_b, np.tile([0.0, 1.0, 0.0], (n, 1))),
        (in_a, np.tile([1.0, 0.0, 0.0], (n, 1))),
    ):
        bary[mask] = val[mask]
    pts = bary[:, [0]] * a + bary[:, [1]] * b + bary[:, [2]] * c
    return pts, bary


@dataclass
class ClosestPoints:
    points: np.ndarray
    faces: np.ndarray
    bary: np.ndarray
    sq_dist: np.ndarray


class MeshQuery:
    """Exact closest-point search on a fixed mesh.

    Candidate triangles are pruned with a KD-tree over face centroids and a
    per-query upper bound (nearest vertex, or a caller-supplied hint face).
    """

    def __init__(self, mesh: TriangleMesh, chunk: int = 4096):
        if mesh.n_faces == 0:
            raise EmptyMesh("mesh has no faces")
        self.mesh = mesh
        self.tri = mesh.triangles()
        self.centroids = self.tri.mean(axis=1)
        self.radii = np.linalg.norm(self.tri - self.centroids[:, None], axis=2).max(axis=1)
        self.max_radius = float(self.radii.max())
        self.centroid_tree = cKDTree(self.centroids)
        self.vertex_tree = cKDTree(mesh.vertices)
        self.vertex_normals = mesh.normals()
        self.face_normals = mesh.face_normals()
        self.chunk = chunk

    def _upper_bound(self, q, hint_faces):
        if hint_faces is not None:
            t = self.tri[hint_faces]
            p, _ = closest_point_on_triangles(q, t[:, 0], t[:, 1], t[:, 2])
            return np.linalg.norm(q - p, axis=1)
        d, _ = self.vertex_tree.query(q)
        return d

    def closest(self, queries, hint_faces=None) -> ClosestPoints:
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        out = ClosestPoints(np.empty((len(q), 3)), np.empty(len(q), np.int64),
                            np.empty((len(q), 3)), np.empty(len(q)))
        for s in range(0, len(q), self.chunk):
            sl = slice(s, s + self.chunk)
            hint = None if hint_faces is None else np.asarray(hint_faces)[sl]
            self._closest_chunk(q[sl], hint, out, sl)
        return out

    def _closest_chunk(self, q, hint, out, sl):
        ub = self._upper_bound(q, hint)
        # slack covers rounding in the bound itself
        slack = 1e-12 * (1.0 + ub)
        reach = ub + self.max_radius + slack
        qid, fid = self._candidates(q, ub + slack, reach)
        t = self.tri[fid]
        pts, bary = closest_point_on_triangles(q[qid], t[:, 0], t[:, 1], t[:, 2])
        d2 = np.sum((q[qid] - pts) ** 2, axis=1)
        order = np.lexsort((fid, d2, qid))
        qs = qid[order]
        first = order[np.r_[True, qs[1:] != qs[:-1]]]
        if len(first) != len(q):
            raise RuntimeError("closest-point pruning lost a query")
        out.points[sl] = pts[first]
        out.faces[sl] = fid[first]
        out.bary[sl] = bary[first]
        out.sq_dist[sl] = d2[first]

    def _candidates(self, q, bound, reach):
        """(query, face) pairs with centroid distance minus face radius <= bound.

        k-nearest centroid queries are widened until the k-th neighbour lies
        beyond ``reach``, which makes the candidate set complete.
        """
        m = len(self.centroids)
        todo = np.arange(len(q))
        k = min(8, m)
        qids, fids = [], []
        while len(todo):
            dist, idx = self.centroid_tree.query(q[todo], k=k, distance_upper_bound=float(reach[todo].max()))
            dist, idx = dist.reshape(len(todo), k), idx.reshape(len(todo), k)
            done = (k == m) | (dist[:, -1] > reach[todo])
            qd = np.repeat(todo[done], k)
            fd = idx[done].reshape(-1)
            dd = dist[done].reshape(-1)
            ok = fd < m
            qd, fd, dd = qd[ok], fd[ok], dd[ok]
            keep = dd - self.radii[fd] <= bound[qd]
            qids.append(qd[keep])
            fids.append(fd[keep])
            todo = todo[~done]
            k = min(4 * k, m)
        return np.concatenate(qids), np.concatenate(fids)

    def normals_at(self, cp: ClosestPoints) -> np.ndarray:
        return barycentric_normals(self.mesh, cp.faces, cp.bary)


@dataclass(frozen=True, eq=False)
class SurfaceSample:
    position: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise ValueError("sample normal must be unit length")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    """Batched surface samples: positions and unit normals, both (n, 3)."""

    positions: np.ndarray
    normals: np.ndarray

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> SurfaceSample:
        return SurfaceSample(self.positions[i], self.normals[i])

    def transformed(self, T) -> "SurfaceSamples":
        return SurfaceSamples(T.apply(self.positions), T.rotation.apply(self.normals))


def as_query(mesh_or_query) -> MeshQuery:
    return mesh_or_query if isinstance(mesh_or_query, MeshQuery) else MeshQuery(mesh_or_query)


def mesh_distances(points, normals, mesh, lam: float):
    """Batched d = |x - p|^2 + lam |n_x - n_p|^2 with p the closest point on ``mesh``.

    Returns (d, p, n_p, ClosestPoints).
    """
    query = as_query(mesh)
    cp = query.closest(points)
    n_p = query.normals_at(cp)
    d = cp.sq_dist + lam * np.sum((np.asarray(normals) - n_p) ** 2, axis=1)
    return d, cp.points, n_p, cp


def point_mesh_distance(x: SurfaceSample, mesh, lam: float = 1e-6):
    """Normal-augmented distance from one oriented point to a mesh: (d, p, n_p)."""
    d, p, n_p, _ = mesh_distances(x.position[None], x.normal[None], mesh, lam)
    return float(d[0]), p[0], n_p[0]
