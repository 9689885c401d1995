"""Lift xyz maps to a target triangle mesh with pixel provenance."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from facegeom.errors import EmptyFace
from facegeom.maps import MapStack
from facegeom.mesh import TriangleMesh, vertex_normals
from facegeom.meshio import write_ply


@dataclass(frozen=True, eq=False)
class TargetMesh:
    mesh: TriangleMesh
    pixel_of_vertex: np.ndarray
    embedding: np.ndarray

    @property
    def vertices(self):
        return self.mesh.vertices

    @property
    def vertex_count(self):
        return self.mesh.vertex_count

    @cached_property
    def normals(self):
        return vertex_normals(self.mesh, return_valid=True)


def quad_faces(index):
    """Two triangles per 2x2 block of ``index`` (vertex ids, -1 = invalid)
    whose four entries are valid, split along the top-left/bottom-right
    diagonal. Winding is counter-clockwise seen from +z with y up."""
    tl = index[:-1, :-1]
    tr = index[:-1, 1:]
    bl = index[1:, :-1]
    br = index[1:, 1:]
    full = (tl >= 0) & (tr >= 0) & (bl >= 0) & (br >= 0)
    tl, tr, bl, br = tl[full], tr[full], bl[full], br[full]
    faces = np.empty((2 * len(tl), 3), dtype=np.int64)
    faces[0::2] = np.stack([tl, bl, br], axis=1)
    faces[1::2] = np.stack([tl, br, tr], axis=1)
    return faces


def lift_maps_to_mesh(stack: MapStack) -> TargetMesh:
    """One vertex per valid pixel (row-major), two faces per fully valid quad.

    Partially valid quads produce no faces, so the target may have holes.
    """
    mask = stack.mask
    if stack.valid_count < 3:
        raise EmptyFace(f"only {stack.valid_count} valid pixel(s); need at least 3")
    rows, cols = np.nonzero(mask)
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[rows, cols] = np.arange(len(rows))
    verts = stack.xyz[rows, cols]
    mesh = TriangleMesh(verts, quad_faces(index))
    pixels = np.stack([rows, cols], axis=1).astype(np.int64)
    return TargetMesh(mesh, pixels, stack.correspondence[rows, cols].copy())


def write_target_ply(path, target: TargetMesh, binary=True):
    props = {
        "row": target.pixel_of_vertex[:, 0],
        "col": target.pixel_of_vertex[:, 1],
        "ex": target.embedding[:, 0],
        "ey": target.embedding[:, 1],
        "ez": target.embedding[:, 2],
    }
    write_ply(path, target.mesh, props, binary=binary)
