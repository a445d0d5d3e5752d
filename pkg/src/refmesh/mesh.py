"""Indexed triangle meshes, OBJ/PLY I/O and basic topology queries."""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import EmptyMesh, MeshIOError, ParseError, UnsupportedFeature

logger = logging.getLogger(__name__)


class FanTriangulationWarning(UserWarning):
    """Emitted when polygons with more than three corners were split on load."""


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable indexed triangle mesh for one frame.

    The edge set is never stored; :meth:`edges` derives it from ``faces``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", _frozen(v, np.float64))
        object.__setattr__(self, "faces", _frozen(f, np.int64))
        object.__setattr__(self, "frame_index", int(self.frame_index))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_vertices(self, vertices, frame_index=None):
        return TriMesh(vertices, self.faces,
                       self.frame_index if frame_index is None else frame_index)

    def with_frame_index(self, frame_index):
        return TriMesh(self.vertices, self.faces, frame_index)

    def edges(self):
        """Unique undirected edges as an (E, 2) array with ``e[:, 0] < e[:, 1]``."""
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    def face_normals(self, normalize=True):
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if normalize:
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
        return n

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def area(self):
        return float(self.face_areas().sum())

    def vertex_normals(self):
        """Area-weighted vertex normals; isolated vertices get a zero vector."""
        fn = self.face_normals(normalize=False)
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return np.divide(vn, norm, out=np.zeros_like(vn), where=norm > 0)

    def signed_volume(self, face_mask=None):
        f = self.faces if face_mask is None else self.faces[face_mask]
        tri = self.vertices[f]
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def bbox_diagonal(self):
        box = bounding_box(self)
        return float(np.linalg.norm(box.max - box.min))

    def face_components(self):
        """Label faces by edge-adjacency class. Returns ``(count, labels)``."""
        return face_components(self)

    def vertex_components(self):
        """Label vertices by connectivity through faces. Returns ``(count, labels)``."""
        n = self.n_vertices
        if self.n_faces == 0:
            return n, np.arange(n)
        e = self.edges()
        adj = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        return csgraph.connected_components(adj, directed=False)

    def submesh(self, face_mask):
        """Mesh made of the selected faces, with unused vertices dropped."""
        f = self.faces[face_mask]
        used, inv = np.unique(f, return_inverse=True)
        return TriMesh(self.vertices[used], inv.reshape(-1, 3), self.frame_index)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.min, np.float64)
        hi = _frozen(self.max, np.float64)
        if np.any(lo > hi):
            raise ValueError("Aabb min must be <= max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self):
        return self.max - self.min

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.extent))

    def union(self, other):
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    @classmethod
    def of_points(cls, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise EmptyMesh("no points")
        return cls(points.min(axis=0), points.max(axis=0))


@dataclass(frozen=True)
class MeshSequence:
    frames: tuple
    name: str = "sequence"

    def __post_init__(self):
        frames = tuple(self.frames)
        for i, m in enumerate(frames):
            if m.frame_index != i:
                raise ValueError(f"frame {i} carries frame_index {m.frame_index}")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)

    @classmethod
    def from_meshes(cls, meshes, name="sequence"):
        return cls(tuple(m.with_frame_index(i) for i, m in enumerate(meshes)), name)


def bounding_box(mesh):
    if mesh.n_vertices == 0:
        raise EmptyMesh("bounding box of an empty mesh")
    return Aabb.of_points(mesh.vertices)


def edge_face_counts(faces):
    """Unique undirected edges of ``faces`` and the number of incident faces."""
    e = np.sort(np.asarray(faces)[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    return np.unique(e, axis=0, return_counts=True)


def validate_watertight(mesh):
    """Check that every undirected edge has exactly two incident faces.

    Returns
    -------
    (bool, int)
        ``(watertight, boundary_edge_count)``. Edges with one incident face
        count as boundary; non-manifold edges (three or more faces) make the
        mesh non-watertight without adding to the boundary count.
    """
    if mesh.n_faces == 0:
        return False, 0
    _, counts = edge_face_counts(mesh.faces)
    return bool(np.all(counts == 2)), int(np.sum(counts == 1))


def face_components(mesh):
    nf = mesh.n_faces
    if nf == 0:
        return 0, np.zeros(0, dtype=np.int64)
    e = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    fid = np.repeat(np.arange(nf), 3)
    _, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.ravel()
    order = np.argsort(inv, kind="stable")
    inv_s, fid_s = inv[order], fid[order]
    same = inv_s[1:] == inv_s[:-1]
    a, b = fid_s[:-1][same], fid_s[1:][same]
    adj = sparse.coo_matrix((np.ones(len(a)), (a, b)), shape=(nf, nf))
    return csgraph.connected_components(adj, directed=False)


def weld_vertices(mesh, tol=1e-9):
    """Merge vertices closer than ``tol``; faces that collapse are removed."""
    from scipy.spatial import cKDTree

    v = mesh.vertices
    pairs = cKDTree(v).query_pairs(tol, output_type="ndarray")
    n = len(v)
    if len(pairs) == 0:
        return mesh
    adj = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = csgraph.connected_components(adj, directed=False)
    # representative = first vertex of each class, keeps original ordering
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(len(first), dtype=np.int64)
    remap[order] = np.arange(len(first))
    new_v = v[np.sort(first)]
    f = remap[labels[mesh.faces]]
    keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    return TriMesh(new_v, f[keep], mesh.frame_index)


# --------------------------------------------------------------------------- I/O

def _resolve_format(path, fmt):
    if fmt is None:
        fmt = Path(path).suffix.lstrip(".")
    fmt = fmt.upper()
    if fmt not in ("OBJ", "PLY"):
        raise ValueError(f"unsupported mesh format {fmt!r}")
    return fmt


def load_mesh(path, format=None, frame_index=0, strict=False):
    """Read a triangle mesh from an OBJ or PLY file.

    Polygons with more than three corners are fan-triangulated with a
    :class:`FanTriangulationWarning`, or rejected with
    :class:`UnsupportedFeature` when ``strict`` is set.
    """
    fmt = _resolve_format(path, format)
    if not os.path.isfile(path):
        raise MeshIOError(f"no such file: {path}")
    if fmt == "OBJ":
        v, f, fanned = _read_obj(path)
    else:
        v, f, _, fanned = _read_ply(path)
        if f is None:
            f = np.zeros((0, 3), dtype=np.int64)
    if fanned:
        msg = f"{path}: {fanned} polygon(s) fan-triangulated"
        if strict:
            raise UnsupportedFeature(msg)
        warnings.warn(msg, FanTriangulationWarning, stacklevel=2)
    try:
        return TriMesh(v, f, frame_index)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def save_mesh(mesh, path, format=None, binary=True):
    fmt = _resolve_format(path, format)
    try:
        if fmt == "OBJ":
            _write_obj(path, mesh)
        else:
            write_ply(path, mesh.vertices, mesh.faces, binary=binary)
    except OSError as exc:
        raise MeshIOError(f"cannot write {path}: {exc}") from exc


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _read_obj(path):
    verts, faces = [], []
    fanned = 0
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad vertex record") from exc
                if len(verts[-1]) != 3:
                    raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError as exc:
                        raise ParseError(f"{path}:{lineno}: bad face index {tok!r}") from exc
                    if i == 0:
                        raise ParseError(f"{path}:{lineno}: OBJ indices are 1-based, got 0")
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ParseError(f"{path}:{lineno}: face with fewer than 3 corners")
                if len(idx) > 3:
                    fanned += 1
                faces.extend(_fan(idx))
            # other records (vt, vn, o, g, usemtl, ...) are skipped
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise ParseError(f"{path}: face index out of range")
    return v, f, fanned


def _write_obj(path, mesh):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {mesh.n_vertices} vertices, {mesh.n_faces} faces\n")
        np.savetxt(fh, mesh.vertices, fmt="v %.17g %.17g %.17g")
        np.savetxt(fh, mesh.faces + 1, fmt="f %d %d %d")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise ParseError(f"{path}: missing 'ply' magic")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise ParseError(f"{path}: unterminated header")
        parts = line.decode("ascii", errors="replace").split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1]["props"].append((parts[4], "list", parts[2], parts[3]))
            else:
                elements[-1]["props"].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
    for el in elements:
        for p in el["props"]:
            for t in p[1:]:
                if t != "list" and t not in _PLY_TYPES:
                    raise ParseError(f"{path}: unknown PLY type {t!r}")
    return fmt, elements


def _read_ply(path):
    """Returns ``(vertices, faces or None, vertex_props, fanned)``."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        body = fh.read()
    verts = faces = None
    props = {}
    fanned = 0
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for el in elements:
            rows = []
            for _ in range(el["count"]):
                row = []
                for p in el["props"]:
                    if p[1] == "list":
                        n = int(tokens[pos]); pos += 1
                        row.append([int(t) for t in tokens[pos:pos + n]]); pos += n
                    else:
                        row.append(float(tokens[pos])); pos += 1
                rows.append(row)
            if pos > len(tokens):
                raise ParseError(f"{path}: truncated ASCII body")
            verts, faces, fanned = _collect(el, rows, verts, faces, props, fanned)
    else:
        buf = memoryview(body)
        pos = 0
        for el in elements:
            if all(p[1] != "list" for p in el["props"]):
                dt = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in el["props"]])
                nbytes = dt.itemsize * el["count"]
                if pos + nbytes > len(buf):
                    raise ParseError(f"{path}: truncated binary body")
                arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt)
                pos += nbytes
                verts, faces, fanned = _collect(el, arr, verts, faces, props, fanned, structured=True)
            else:
                rows, pos, structured = _read_binary_lists(buf, pos, el, path)
                verts, faces, fanned = _collect(el, rows, verts, faces, props, fanned, structured)
    if verts is None:
        raise ParseError(f"{path}: no vertex element")
    return verts, faces, props, fanned


def _read_binary_lists(buf, pos, el, path):
    # fast path: every list has exactly three entries
    fields = []
    for p in el["props"]:
        if p[1] == "list":
            fields.append((p[0] + "_n", "<" + _PLY_TYPES[p[2]]))
            fields.append((p[0], "<" + _PLY_TYPES[p[3]], (3,)))
        else:
            fields.append((p[0], "<" + _PLY_TYPES[p[1]]))
    dt = np.dtype(fields)
    nbytes = dt.itemsize * el["count"]
    if pos + nbytes <= len(buf):
        arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt)
        counts_ok = all(np.all(arr[p[0] + "_n"] == 3) for p in el["props"] if p[1] == "list")
        if counts_ok:
            return arr, pos + nbytes, True
    rows = []
    for _ in range(el["count"]):
        row = []
        for p in el["props"]:
            if p[1] == "list":
                ct = np.dtype("<" + _PLY_TYPES[p[2]])
                it = np.dtype("<" + _PLY_TYPES[p[3]])
                if pos + ct.itemsize > len(buf):
                    raise ParseError(f"{path}: truncated binary body")
                n = int(np.frombuffer(buf[pos:pos + ct.itemsize], dtype=ct)[0]); pos += ct.itemsize
                if pos + n * it.itemsize > len(buf):
                    raise ParseError(f"{path}: truncated binary body")
                row.append(np.frombuffer(buf[pos:pos + n * it.itemsize], dtype=it).tolist())
                pos += n * it.itemsize
            else:
                t = np.dtype("<" + _PLY_TYPES[p[1]])
                if pos + t.itemsize > len(buf):
                    raise ParseError(f"{path}: truncated binary body")
                row.append(np.frombuffer(buf[pos:pos + t.itemsize], dtype=t)[0]); pos += t.itemsize
        rows.append(row)
    return rows, pos, False


def _collect(el, rows, verts, faces, props, fanned, structured=False):
    names = [p[0] for p in el["props"]]
    if el["name"] == "vertex":
        if not all(c in names for c in "xyz"):
            raise ParseError("vertex element lacks x/y/z")
        if structured and rows.dtype.names is not None:
            cols = {n: np.asarray(rows[n], dtype=np.float64) for n in names}
        else:
            data = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
            cols = {n: data[:, i] for i, n in enumerate(names)}
        verts = np.column_stack([cols["x"], cols["y"], cols["z"]])
        props.update({n: c for n, c in cols.items() if n not in "xyz"})
    elif el["name"] == "face":
        key = next((i for i, p in enumerate(el["props"]) if p[1] == "list"
                    and p[0] in ("vertex_indices", "vertex_index")), None)
        if key is None:
            raise ParseError("face element lacks vertex_indices list")
        if structured:
            return verts, np.asarray(rows[names[key]], dtype=np.int64).reshape(-1, 3), fanned
        tris = []
        for row in rows:
            poly = [int(i) for i in row[key]]
            if len(poly) < 3:
                raise ParseError("face with fewer than 3 corners")
            if len(poly) > 3:
                fanned += 1
            tris.extend(_fan(poly))
        faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return verts, faces, fanned


def write_ply(path, vertices, faces=None, vertex_props=None, binary=True):
    """Write vertices (plus optional faces and float vertex properties) as PLY."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    vertex_props = dict(vertex_props or {})
    header = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0",
              f"element vertex {len(vertices)}",
              "property double x", "property double y", "property double z"]
    for name in vertex_props:
        header.append(f"property double {name}")
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    cols = [vertices] + [np.asarray(v, dtype=np.float64).reshape(-1, 1) for v in vertex_props.values()]
    vdata = np.hstack(cols) if cols else vertices
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(vdata.astype("<f8").tobytes())
            if faces is not None:
                fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
                rec = np.empty(len(faces), dtype=fdt)
                rec["n"] = 3
                rec["i"] = faces
                fh.write(rec.tobytes())
        else:
            np.savetxt(fh, vdata, fmt="%.17g")
            if faces is not None:
                np.savetxt(fh, np.column_stack([np.full(len(faces), 3), faces]), fmt="%d")


def read_ply_points(path):
    """Read a PLY point cloud. Returns ``(points, vertex_props)``."""
    v, _, props, _ = _read_ply(path)
    return v, props
