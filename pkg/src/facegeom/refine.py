"""Mesoscopic detail: intensity high-pass turned into normal displacements.

The deformed template is subdivided, every vertex samples the intensity of
its nearest valid pixel, the texture is high-pass filtered with one implicit
heat step, and vertices move along their normals by a blend of a
data-driven term (local texture differences, attenuated where the surface
bends) and one explicit mean-curvature fairing step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from facegeom import kernels
from facegeom.errors import NoValidPixels, ZeroLengthEdge
from facegeom.maps import MapStack
from facegeom.mesh import SPDSolver, TriangleMesh, cotangent_laplacian, subdivide_midpoint, \
    vertex_normals
from facegeom.meshio import write_ply
from facegeom.rigid import nearest_lowest_index

SAMPLE_RADIUS_PX = 5.0


@dataclass(frozen=True)
class RefineConfig:
    dt: float = 0.2
    eta: float = 0.2
    gain: float = 1.0
    fairing_step: float = 0.5
    subdivision_levels: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if not 0 <= self.subdivision_levels <= 3:
            raise ValueError("subdivision_levels must be in [0, 3]")
        if not (np.isfinite(self.gain) and np.isfinite(self.fairing_step)):
            raise ValueError("gain and fairing_step must be finite")


@dataclass(frozen=True, eq=False)
class VertexTexture:
    """Per-vertex intensity ``tau``, its high-pass ``mu`` and a flag for
    vertices whose intensity was filled in rather than sampled."""

    tau: np.ndarray
    mu: np.ndarray = None
    filled: np.ndarray = None

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=np.float64)
        if tau.ndim != 1:
            raise ValueError("tau must be a vector")
        object.__setattr__(self, "tau", tau)
        if self.mu is not None:
            mu = np.asarray(self.mu, dtype=np.float64)
            if mu.shape != tau.shape:
                raise ValueError("mu and tau lengths differ")
            object.__setattr__(self, "mu", mu)
        filled = np.zeros(len(tau), bool) if self.filled is None else np.asarray(self.filled, bool)
        if filled.shape != tau.shape:
            raise ValueError("filled flags and tau lengths differ")
        object.__setattr__(self, "filled", filled)

    def __len__(self):
        return len(self.tau)


def _fill_from_neighbours(mesh, values, known):
    """Propagate the 1-ring mean of known values into unknown vertices;
    whatever stays unreachable gets the global mean of the known ones."""
    values = values.copy()
    known = known.copy()
    indptr, indices = mesh.adjacency
    rows = np.repeat(np.arange(mesh.vertex_count), np.diff(indptr))
    while not known.all():
        src = known[indices]
        total = np.bincount(rows, weights=np.where(src, values[indices], 0.0),
                            minlength=mesh.vertex_count)
        count = np.bincount(rows, weights=src.astype(float), minlength=mesh.vertex_count)
        grow = ~known & (count > 0)
        if not grow.any():
            break
        values[grow] = total[grow] / count[grow]
        known |= grow
    values[~known] = values[known].mean()
    return values


def sample_intensity(mesh: TriangleMesh, stack: MapStack) -> VertexTexture:
    """Intensity of the valid pixel nearest to each vertex's orthographic
    projection. Vertices farther than 5 px from any valid pixel are filled
    with the mean of their sampled neighbours and flagged."""
    if stack.valid_count == 0:
        raise NoValidPixels("intensity sampling needs at least one valid pixel")
    rows, cols = np.nonzero(stack.mask)
    centres = np.stack([rows, cols], axis=1).astype(np.float64)
    r, c = stack.camera.project(np.asarray(mesh.vertices))
    query = np.stack([r, c], axis=1)
    idx = nearest_lowest_index(centres, query, kernels.thread_count())
    dist = np.linalg.norm(centres[idx] - query, axis=1)
    tau = stack.intensity[rows[idx], cols[idx]].astype(np.float64)
    near = dist <= SAMPLE_RADIUS_PX
    if not near.all():
        tau = _fill_from_neighbours(mesh, tau, near) if near.any() else \
            np.full(len(tau), stack.intensity[stack.mask].mean())
    return VertexTexture(tau, filled=~near)


def heat_operator(mesh: TriangleMesh, dt: float):
    """``I - dt L`` with ``L`` the (negative semidefinite) cotangent Laplacian."""
    lap = cotangent_laplacian(mesh).matrix
    return (sp.identity(mesh.vertex_count, format="csr") - dt * lap).tocsc()


def highpass_texture(mesh: TriangleMesh, tau, cfg: RefineConfig = None) -> np.ndarray:
    """``mu = tau - (I - dt L)^-1 tau``: the texture minus one implicit heat step."""
    cfg = cfg or RefineConfig()
    tau = np.asarray(tau, dtype=np.float64)
    if tau.shape != (mesh.vertex_count,):
        raise ValueError("tau must hold one value per vertex")
    smooth = SPDSolver(heat_operator(mesh, cfg.dt)).solve(tau)
    return tau - smooth


def _check_edges(mesh):
    e = mesh.edges
    v = np.asarray(mesh.vertices)
    length = np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1)
    if np.any(length <= 0):
        raise ZeroLengthEdge(f"{int((length <= 0).sum())} zero-length edge(s)")


def data_driven_displacement(mesh: TriangleMesh, mu, cfg: RefineConfig = None,
                             normals=None, backend=None) -> np.ndarray:
    """Weighted 1-ring average of ``mu(v) - mu(v_i)``, each term damped by how
    far the edge leaves the tangent plane; weights ``exp(-|v - v_i|)``.
    Scaled by ``cfg.gain``; isolated vertices get 0."""
    cfg = cfg or RefineConfig()
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    if mu.shape != (mesh.vertex_count,):
        raise ValueError("mu must hold one value per vertex")
    _check_edges(mesh)
    if normals is None:
        normals = vertex_normals(mesh)
    indptr, indices = mesh.adjacency
    out = kernels.detail_displacement(np.asarray(mesh.vertices), np.asarray(normals, np.float64),
                                      mu, indptr, indices, backend=backend)
    return cfg.gain * out


def fairing_displacement(mesh: TriangleMesh, cfg: RefineConfig = None, normals=None) -> np.ndarray:
    """Normal component of one explicit mean-curvature-flow step,
    ``fairing_step * <L v / A, n>`` with mixed Voronoi areas ``A``."""
    cfg = cfg or RefineConfig()
    lap = cotangent_laplacian(mesh).matrix
    if cfg.fairing_step == 0:
        return np.zeros(mesh.vertex_count)
    if normals is None:
        normals = vertex_normals(mesh)
    hn = (lap @ np.asarray(mesh.vertices)) / mesh.mixed_vertex_areas()[:, None]
    return cfg.fairing_step * (hn * normals).sum(axis=1)


def apply_detail_displacement(mesh: TriangleMesh, delta_mu, delta_s, cfg: RefineConfig = None,
                              normals=None) -> TriangleMesh:
    """``v + (eta * delta_mu + (1 - eta) * delta_s) * n(v)``."""
    cfg = cfg or RefineConfig()
    n = mesh.vertex_count
    delta_mu = np.asarray(delta_mu, dtype=np.float64)
    delta_s = np.asarray(delta_s, dtype=np.float64)
    if delta_mu.shape != (n,) or delta_s.shape != (n,):
        raise ValueError("displacements must hold one value per vertex")
    if normals is None:
        normals = vertex_normals(mesh)
    step = cfg.eta * delta_mu + (1.0 - cfg.eta) * delta_s
    return mesh.with_vertices(np.asarray(mesh.vertices) + step[:, None] * normals)


def refine_mesh(deformed: TriangleMesh, stack: MapStack, cfg: RefineConfig = None,
                return_texture=False):
    """Subdivide, sample, high-pass and displace. Returns the refined mesh,
    or ``(mesh, VertexTexture)`` with ``return_texture=True``."""
    cfg = cfg or RefineConfig()
    mesh = subdivide_midpoint(deformed, cfg.subdivision_levels)
    texture = sample_intensity(mesh, stack)
    mu = highpass_texture(mesh, texture.tau, cfg)
    normals = vertex_normals(mesh)
    d_mu = data_driven_displacement(mesh, mu, cfg, normals)
    d_s = fairing_displacement(mesh, cfg, normals)
    out = apply_detail_displacement(mesh, d_mu, d_s, cfg, normals)
    if return_texture:
        return out, VertexTexture(texture.tau, mu, texture.filled)
    return out


def write_refined_ply(path, mesh: TriangleMesh, texture: VertexTexture = None, binary=True):
    props = None
    if texture is not None:
        props = {"tau": texture.tau}
        if texture.mu is not None:
            props["mu"] = texture.mu
    write_ply(path, mesh, props, binary=binary)
