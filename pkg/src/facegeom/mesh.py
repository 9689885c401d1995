"""Triangle meshes and the discrete operators built on them.

Vertex positions are in millimetres. Meshes are immutable: the arrays are
copied on construction and flagged read-only, so a mesh can be shared
between threads and stages without defensive copies.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from facegeom.errors import (
    DegenerateTriangle,
    InvalidMesh,
    NotConverged,
    SingularSystem,
)

DEGENERATE_AREA = 1e-12
MEMBRANE_SCHEMES = ("uniform", "cotangent", "bilaplacian")


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = _frozen(self.vertices, np.float64).reshape(-1, 3)
        faces = _frozen(self.faces, np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise InvalidMesh("vertex coordinates must be finite")
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(vertices):
                raise InvalidMesh("face index out of range")
            if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                      | (faces[:, 0] == faces[:, 2])):
                raise InvalidMesh("face with repeated vertex index")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same triangulation, new positions."""
        return TriangleMesh(vertices, self.faces)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(i, j)`` rows with ``i < j``."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        e = np.unique(e, axis=0)
        e.setflags(write=False)
        return e

    @cached_property
    def adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        """1-ring neighbours in CSR form ``(indptr, indices)``, sorted per row."""
        e = self.edges
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        indptr = np.zeros(self.vertex_count + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=self.vertex_count), out=indptr[1:])
        return indptr, cols.astype(np.int64)

    def face_areas(self) -> np.ndarray:
        cross = _face_cross(self.vertices, self.faces)
        return 0.5 * np.sqrt((cross * cross).sum(axis=1))

    def vertex_areas(self) -> np.ndarray:
        """Barycentric vertex areas (one third of each incident face)."""
        third = np.repeat(self.face_areas() / 3.0, 3)
        return np.bincount(self.faces.ravel(), weights=third, minlength=self.vertex_count)

    def mixed_vertex_areas(self) -> np.ndarray:
        """Mixed Voronoi areas (Meyer et al.): Voronoi cells on non-obtuse
        triangles, half/quarter splits of obtuse ones."""
        v, f = self.vertices, self.faces
        cross = _face_cross(v, f)
        area = 0.5 * np.sqrt((cross * cross).sum(axis=1))
        cots = np.empty((len(f), 3))
        dots = np.empty((len(f), 3))
        for k in range(3):
            o, i, j = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
            u = v[i] - v[o]
            w = v[j] - v[o]
            dots[:, k] = (u * w).sum(axis=1)
            cots[:, k] = dots[:, k] / (2.0 * area)
        obtuse = dots < 0
        any_obtuse = obtuse.any(axis=1)
        per_corner = np.zeros((len(f), 3))
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            # corner k owns parts of edges (k,i) and (k,j); opposite angles are j and i
            l_ki = ((v[f[:, k]] - v[f[:, i]]) ** 2).sum(axis=1)
            l_kj = ((v[f[:, k]] - v[f[:, j]]) ** 2).sum(axis=1)
            per_corner[:, k] = (l_ki * cots[:, j] + l_kj * cots[:, i]) / 8.0
        fallback = np.where(obtuse, area[:, None] / 2.0, area[:, None] / 4.0)
        per_corner = np.where(any_obtuse[:, None], fallback, per_corner)
        return np.bincount(f.ravel(), weights=per_corner.ravel(), minlength=self.vertex_count)

    def boundary_vertices(self) -> np.ndarray:
        """Boolean mask of vertices on an edge used by exactly one face."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        mask = np.zeros(self.vertex_count, dtype=bool)
        mask[uniq[counts == 1].ravel()] = True
        return mask


@dataclass(frozen=True, eq=False)
class TemplateMesh:
    """A mesh whose vertices carry canonical embedding coordinates."""

    mesh: TriangleMesh
    embedding: np.ndarray

    def __post_init__(self):
        emb = _frozen(self.embedding, np.float64).reshape(-1, 3)
        if len(emb) != self.mesh.vertex_count:
            raise InvalidMesh(
                f"embedding has {len(emb)} rows for {self.mesh.vertex_count} vertices")
        if not np.all(np.isfinite(emb)):
            raise InvalidMesh("embedding must be finite")
        if emb.size and np.abs(emb).max() > 1.0 + 1e-9:
            raise InvalidMesh("embedding coordinates must lie in [-1, 1]")
        object.__setattr__(self, "embedding", emb)

    @property
    def vertices(self):
        return self.mesh.vertices

    @property
    def faces(self):
        return self.mesh.faces

    @property
    def vertex_count(self):
        return self.mesh.vertex_count


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """Square sparse matrix plus a symmetry flag.

    ``matrix`` is a CSR matrix; ``triplets()`` exposes the (row, col, weight)
    view used by file dumps and tests.
    """

    matrix: sp.csr_matrix
    symmetric: bool = True

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        m.sort_indices()
        if m.shape[0] != m.shape[1]:
            raise ValueError("operator must be square")
        object.__setattr__(self, "matrix", m)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def triplets(self):
        coo = self.matrix.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data.copy()

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, other):
        return self.matrix @ other


def _face_cross(vertices, faces):
    p0, p1, p2 = (vertices[faces[:, k]] for k in range(3))
    a = p1 - p0
    b = p2 - p0
    return np.stack([
        a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
        a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
        a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0],
    ], axis=1)


def vertex_normals(mesh: TriangleMesh, return_valid: bool = False):
    """Area-weighted unit vertex normals.

    Each face contributes its unnormalised cross product (twice its area
    times its unit normal) to its three corners, in face order. Vertices
    that touch no face, or whose contributions cancel, get the zero vector;
    ``return_valid=True`` also returns the boolean validity mask.
    """
    n = mesh.vertex_count
    cross = _face_cross(mesh.vertices, mesh.faces)
    idx = mesh.faces.ravel()
    acc = np.empty((n, 3))
    for k in range(3):
        # bincount accumulates sequentially, so each vertex sums its faces in order
        acc[:, k] = np.bincount(idx, weights=np.repeat(cross[:, k], 3), minlength=n)
    norm = np.sqrt(acc[:, 0] * acc[:, 0] + acc[:, 1] * acc[:, 1] + acc[:, 2] * acc[:, 2])
    valid = norm > 0
    out = np.zeros_like(acc)
    out[valid] = acc[valid] / norm[valid, None]
    if return_valid:
        return out, valid
    return out


def _check_nondegenerate(mesh):
    areas = mesh.face_areas()
    bad = np.flatnonzero(areas <= DEGENERATE_AREA)
    if bad.size:
        raise DegenerateTriangle(
            f"{bad.size} face(s) with area <= {DEGENERATE_AREA:g} mm^2, first is face {bad[0]}")


def _cotangent_edge_weights(mesh):
    """Unique edges and their weights (cot a + cot b) / 2."""
    _check_nondegenerate(mesh)
    v, f = mesh.vertices, mesh.faces
    cross = _face_cross(v, f)
    dbl_area = np.sqrt((cross * cross).sum(axis=1))
    halves = []
    keys = []
    n = mesh.vertex_count
    for k in range(3):
        i, j, o = f[:, (k + 1) % 3], f[:, (k + 2) % 3], f[:, k]
        u = v[i] - v[o]
        w = v[j] - v[o]
        cot = (u * w).sum(axis=1) / dbl_area
        halves.append(0.5 * cot)
        keys.append(np.minimum(i, j) * n + np.maximum(i, j))
    keys = np.stack(keys, axis=1).ravel()
    halves = np.stack(halves, axis=1).ravel()
    uniq, inverse = np.unique(keys, return_inverse=True)
    weights = np.bincount(inverse, weights=halves)
    edges = np.stack([uniq // n, uniq % n], axis=1)
    return edges, weights


def _symmetric_from_edges(n, edges, weights, with_diagonal):
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    vals = np.concatenate([weights, weights])
    if with_diagonal:
        diag = -np.bincount(rows, weights=vals, minlength=n)
        rows = np.concatenate([rows, np.arange(n)])
        cols = np.concatenate([cols, np.arange(n)])
        vals = np.concatenate([vals, diag])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def cotangent_laplacian(mesh: TriangleMesh) -> SparseOperator:
    """Cotangent Laplacian with ``(L f)_i = sum_j w_ij (f_j - f_i)``.

    Off-diagonals are ``(cot a + cot b) / 2``, the diagonal is minus the row
    sum, so linear functions on flat interior regions are annihilated and
    ``L @ vertices`` points along the inward mean-curvature normal. Boundary
    rows only sum over existing neighbours.
    """
    edges, weights = _cotangent_edge_weights(mesh)
    return SparseOperator(_symmetric_from_edges(mesh.vertex_count, edges, weights, True))


def membrane_weights(mesh: TriangleMesh, scheme: str = "bilaplacian") -> SparseOperator:
    """Per-edge stiffness weights ``w_ij`` (no diagonal) for the membrane term.

    ``uniform`` puts 1 on every edge, ``cotangent`` copies the Laplacian
    off-diagonals and ``bilaplacian`` takes ``|(L L)_ij|`` on 1-ring edges.
    """
    if scheme not in MEMBRANE_SCHEMES:
        raise ValueError(f"unknown membrane scheme {scheme!r}")
    n = mesh.vertex_count
    if scheme == "uniform":
        edges = mesh.edges
        weights = np.ones(len(edges))
    elif scheme == "cotangent":
        edges, weights = _cotangent_edge_weights(mesh)
    else:
        lap = cotangent_laplacian(mesh).matrix
        sq = (lap @ lap).tocsr()
        edges = mesh.edges
        weights = np.abs(np.asarray(sq[edges[:, 0], edges[:, 1]]).ravel())
    return SparseOperator(_symmetric_from_edges(n, edges, weights, False))


class SPDSolver:
    """Sparse factorisation of a symmetric positive definite matrix.

    Factor once, then call :meth:`solve` for any number of right-hand sides.
    Every solve is checked against ``tol`` on the relative residual and gets
    up to two steps of iterative refinement before giving up.
    """

    def __init__(self, matrix, tol=1e-8):
        if isinstance(matrix, SparseOperator):
            matrix = matrix.matrix
        self.matrix = sp.csc_matrix(matrix, dtype=np.float64)
        self.tol = tol
        try:
            self._lu = spla.splu(
                self.matrix,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from exc
        pivots = self._lu.U.diagonal()
        if not np.all(pivots > 0) or not np.all(np.isfinite(pivots)):
            raise SingularSystem("matrix is not positive definite")

    def solve(self, rhs):
        b = np.asarray(rhs, dtype=np.float64)
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros_like(b)
        x = self._lu.solve(b)
        for _ in range(3):
            r = b - self.matrix @ x
            rel = np.linalg.norm(r) / bnorm
            if rel < self.tol:
                return x
            x = x + self._lu.solve(r)
        r = b - self.matrix @ x
        rel = np.linalg.norm(r) / bnorm
        if not np.isfinite(rel):
            raise SingularSystem("solution is not finite")
        if rel >= self.tol:
            raise NotConverged(f"relative residual {rel:.3e} >= {self.tol:g}", residual=rel)
        return x


def solve_spd(op, rhs, tol=1e-8):
    """Solve ``A x = b`` for SPD ``A`` (SparseOperator, sparse or dense matrix).

    ``rhs`` may be a vector or a multi-column array.
    """
    if not isinstance(op, SparseOperator) and not sp.issparse(op):
        op = sp.csc_matrix(np.asarray(op, dtype=np.float64))
    return SPDSolver(op, tol=tol).solve(rhs)


def subdivide_midpoint(mesh, levels: int = 1):
    """Split every triangle 4-way ``levels`` times.

    Accepts a :class:`TriangleMesh` or :class:`TemplateMesh` and returns the
    same type; embeddings are interpolated linearly. Original vertices keep
    their indices and exact positions, new vertices are appended in sorted
    edge order.
    """
    if not 0 <= levels <= 3:
        raise ValueError("levels must be in [0, 3]")
    template = isinstance(mesh, TemplateMesh)
    base = mesh.mesh if template else mesh
    verts = np.asarray(base.vertices)
    faces = np.asarray(base.faces)
    emb = np.asarray(mesh.embedding) if template else None
    for _ in range(levels):
        n = len(verts)
        f = faces
        ab = np.sort(f[:, [0, 1]], axis=1)
        bc = np.sort(f[:, [1, 2]], axis=1)
        ca = np.sort(f[:, [2, 0]], axis=1)
        keys = np.concatenate([ab, bc, ca])
        codes = keys[:, 0] * n + keys[:, 1]
        uniq, inverse = np.unique(codes, return_inverse=True)
        e0, e1 = uniq // n, uniq % n
        mid = n + inverse.reshape(3, -1)
        m_ab, m_bc, m_ca = mid
        verts = np.concatenate([verts, 0.5 * (verts[e0] + verts[e1])])
        if emb is not None:
            emb = np.concatenate([emb, 0.5 * (emb[e0] + emb[e1])])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        faces = np.stack([
            np.stack([a, m_ab, m_ca], axis=1),
            np.stack([m_ab, b, m_bc], axis=1),
            np.stack([m_ca, m_bc, c], axis=1),
            np.stack([m_ab, m_bc, m_ca], axis=1),
        ], axis=1).reshape(-1, 3)
    out = TriangleMesh(verts, faces)
    if template:
        return TemplateMesh(out, emb)
    return out


def icosphere(level: int = 0, radius: float = 1.0) -> TriangleMesh:
    """Icosahedron refined ``level`` times and projected onto a sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    mesh = TriangleMesh(v, f)
    for _ in range(level):
        mesh = subdivide_midpoint(mesh, 1)
        vv = np.asarray(mesh.vertices)
        mesh = TriangleMesh(vv / np.linalg.norm(vv, axis=1, keepdims=True), mesh.faces)
    return TriangleMesh(np.asarray(mesh.vertices) * radius, mesh.faces)


def grid_mesh(nx: int, ny: int, spacing: float = 1.0) -> TriangleMesh:
    """Planar ``nx`` by ``ny`` vertex grid in z=0, quads split along one diagonal."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing)
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    idx = np.arange(nx * ny).reshape(ny, nx)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, :-1].ravel()
    d = idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return TriangleMesh(verts, faces)
