"""PLY and OBJ readers/writers.

Binary little-endian PLY is the interchange format. Positions are written as
``double`` so a write/read cycle is lossless; extra per-vertex arrays (the
embedding ``ex ey ez``, ``intensity``, ``row``/``col``, ``tau``/``mu``) ride
along as additional vertex properties.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from facegeom.errors import MalformedHeader
from facegeom.mesh import TemplateMesh, TriangleMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
EMBEDDING_PROPS = ("ex", "ey", "ez")


def _ply_type(array):
    kind = np.asarray(array).dtype.kind
    if kind in "iub":
        return "int", "<i4"
    return "double", "<f8"


def write_ply(path, mesh, vertex_properties=None, binary=True):
    """Write ``mesh`` (TriangleMesh or TemplateMesh) to ``path``.

    A TemplateMesh contributes its embedding as ``ex ey ez``. ``vertex_properties``
    maps extra property names to per-vertex 1-D arrays.
    """
    props = {}
    if isinstance(mesh, TemplateMesh):
        for k, name in enumerate(EMBEDDING_PROPS):
            props[name] = mesh.embedding[:, k]
        mesh = mesh.mesh
    for name, values in (vertex_properties or {}).items():
        values = np.asarray(values)
        if values.shape != (mesh.vertex_count,):
            raise ValueError(f"property {name!r} must have one value per vertex")
        props[name] = values

    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    header_props = ["property double x", "property double y", "property double z"]
    for name, values in props.items():
        ply_name, np_type = _ply_type(values)
        fields.append((name, np_type))
        header_props.append(f"property {ply_name} {name}")

    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join([
        "ply",
        f"format {fmt} 1.0",
        f"element vertex {mesh.vertex_count}",
        *header_props,
        f"element face {mesh.face_count}",
        "property list uchar int vertex_indices",
        "end_header",
    ]) + "\n"

    table = np.empty(mesh.vertex_count, dtype=fields)
    table["x"], table["y"], table["z"] = mesh.vertices.T
    for name, values in props.items():
        table[name] = values

    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(table.tobytes())
            faces = np.empty(mesh.face_count, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            faces["n"] = 3
            faces["idx"] = mesh.faces
            fh.write(faces.tobytes())
        else:
            lines = []
            for row in table:
                lines.append(" ".join(_ascii_value(row[name]) for name, _ in fields))
            for f in mesh.faces:
                lines.append(f"3 {f[0]} {f[1]} {f[2]}")
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _ascii_value(value):
    if isinstance(value, (np.integer, int)):
        return str(int(value))
    return repr(float(value))


def _parse_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise MalformedHeader("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise MalformedHeader("PLY header has no end_header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append({"name": tokens[1], "count": int(tokens[2]), "props": []})
        elif tokens[0] == "property":
            if not elements:
                raise MalformedHeader("property before element")
            if tokens[1] == "list":
                elements[-1]["props"].append((tokens[4], "list", tokens[2], tokens[3]))
            else:
                elements[-1]["props"].append((tokens[2], tokens[1]))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MalformedHeader(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _np_type(name, endian):
    try:
        return endian + _PLY_TYPES[name]
    except KeyError:
        raise MalformedHeader(f"unknown PLY type {name!r}") from None


def read_ply(path):
    """Read a PLY file into ``(TriangleMesh, properties)``.

    ``properties`` holds every vertex property other than x/y/z. Polygons with
    more than three corners are fan-triangulated.
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        body = fh.read()
    endian = ">" if fmt == "binary_big_endian" else "<"
    data = {}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for el in elements:
            rows = []
            for _ in range(el["count"]):
                row = []
                for prop in el["props"]:
                    if prop[1] == "list":
                        n = int(tokens[pos])
                        pos += 1
                        row.append([float(t) for t in tokens[pos:pos + n]])
                        pos += n
                    else:
                        row.append(float(tokens[pos]))
                        pos += 1
                rows.append(row)
            data[el["name"]] = (el, rows)
    else:
        offset = 0
        for el in elements:
            has_list = any(p[1] == "list" for p in el["props"])
            if not has_list:
                dtype = np.dtype([(p[0], _np_type(p[1], endian)) for p in el["props"]])
                arr = np.frombuffer(body, dtype=dtype, count=el["count"], offset=offset)
                offset += dtype.itemsize * el["count"]
                data[el["name"]] = (el, arr)
            else:
                rows, offset = _read_binary_lists(body, offset, el, endian)
                data[el["name"]] = (el, rows)

    if "vertex" not in data:
        raise MalformedHeader("PLY has no vertex element")
    el, vrows = data["vertex"]
    names = [p[0] for p in el["props"]]
    if fmt == "ascii":
        table = np.array(vrows, dtype=float).reshape(len(vrows), len(names))
        columns = {n: table[:, k] for k, n in enumerate(names)}
        for p in el["props"]:
            if p[1] != "list" and _PLY_TYPES.get(p[1], "f8")[0] in "iu":
                columns[p[0]] = columns[p[0]].astype(np.int64)
    else:
        columns = {n: vrows[n].astype(vrows[n].dtype.newbyteorder("=")) for n in names}
    for axis in "xyz":
        if axis not in columns:
            raise MalformedHeader(f"vertex element lacks property {axis!r}")
    vertices = np.stack([columns.pop("x"), columns.pop("y"), columns.pop("z")], axis=1)

    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in data:
        el, frows = data["face"]
        faces = _triangulate(el, frows)
    return TriangleMesh(vertices.astype(np.float64), faces), columns


def _read_binary_lists(body, offset, el, endian):
    props = el["props"]
    count = el["count"]
    if len(props) == 1 and props[0][1] == "list":
        _, _, ctype, itype = props[0]
        cdt = np.dtype(_np_type(ctype, endian))
        idt = np.dtype(_np_type(itype, endian))
        if count == 0:
            return [[]], offset
        first = int(np.frombuffer(body, dtype=cdt, count=1, offset=offset)[0])
        fast = np.dtype([("n", cdt), ("idx", idt, (first,))])
        if offset + fast.itemsize * count <= len(body):
            arr = np.frombuffer(body, dtype=fast, count=count, offset=offset)
            if np.all(arr["n"] == first):
                return [arr["idx"].astype(np.int64)], offset + fast.itemsize * count
    rows = []
    for _ in range(count):
        row = []
        for prop in props:
            if prop[1] == "list":
                cdt = np.dtype(_np_type(prop[2], endian))
                idt = np.dtype(_np_type(prop[3], endian))
                n = int(np.frombuffer(body, dtype=cdt, count=1, offset=offset)[0])
                offset += cdt.itemsize
                row.append(np.frombuffer(body, dtype=idt, count=n, offset=offset).tolist())
                offset += idt.itemsize * n
            else:
                dt = np.dtype(_np_type(prop[1], endian))
                row.append(np.frombuffer(body, dtype=dt, count=1, offset=offset)[0])
                offset += dt.itemsize
        rows.append(row)
    return rows, offset


def _triangulate(el, rows):
    names = [p[0] for p in el["props"]]
    key = "vertex_indices" if "vertex_indices" in names else (
        "vertex_index" if "vertex_index" in names else None)
    if key is None:
        raise MalformedHeader("face element lacks vertex_indices")
    if len(rows) == 1 and isinstance(rows[0], np.ndarray):
        polys = rows[0]
        if polys.shape[1] == 3:
            return polys
        rows = [[list(p)] for p in polys]
        k = 0
    else:
        k = names.index(key)
    tris = []
    for row in rows:
        poly = [int(i) for i in row[k]]
        for j in range(1, len(poly) - 1):
            tris.append((poly[0], poly[j], poly[j + 1]))
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def read_template(path) -> TemplateMesh:
    """Read a PLY whose vertices carry ``ex ey ez`` embedding properties."""
    mesh, props = read_ply(path)
    missing = [p for p in EMBEDDING_PROPS if p not in props]
    if missing:
        raise MalformedHeader(f"template PLY lacks embedding properties {missing}")
    emb = np.stack([props[p] for p in EMBEDDING_PROPS], axis=1).astype(np.float64)
    return TemplateMesh(mesh, emb)


def write_obj(path, mesh):
    mesh = mesh.mesh if isinstance(mesh, TemplateMesh) else mesh
    with open(path, "w", encoding="ascii") as fh:
        for v in mesh.vertices:
            fh.write("v %r %r %r\n" % tuple(float(x) for x in v))
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path) -> TriangleMesh:
    """Positions and faces only; texture/normal indices are ignored."""
    verts, tris = [], []
    with open(path, encoding="ascii", errors="replace") as fh:
        for line in fh:
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "v":
                verts.append([float(t) for t in tokens[1:4]])
            elif tokens[0] == "f":
                idx = []
                for t in tokens[1:]:
                    i = int(t.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for j in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[j], idx[j + 1]))
    return TriangleMesh(np.array(verts, dtype=float).reshape(-1, 3),
                        np.array(tris, dtype=np.int64).reshape(-1, 3))


def read_mesh(path):
    """Dispatch on suffix; returns ``(TriangleMesh, properties)``."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return read_obj(path), {}
    return read_ply(path)

