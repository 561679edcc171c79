"""Triangle meshes: representation, file I/O, normals, geodesic distances.

Meshes are immutable after construction (arrays are marked read-only), so all
operations here are pure functions that are safe to run concurrently on a
shared mesh. Labels, when present, are 1-based class indices.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import MeshFormatError, ValidationError

NORMAL_TOL = 1e-6


@dataclass
class Mesh:
    """Indexed triangle mesh.

    Parameters
    ----------
    vertices : (N, 3) float array of positions in model units.
    faces : (F, 3) int array of vertex indices; consistent winding assumed.
    normals : optional (N, 3) array of unit vertex normals.
    labels : optional (N,) int array of 1-based class indices.
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(vertices).all():
            raise ValidationError("mesh vertices contain non-finite coordinates")
        n = vertices.shape[0]
        if faces.size:
            if faces.min() < 0 or faces.max() >= n:
                bad = int(np.flatnonzero((faces < 0).any(axis=1) | (faces >= n).any(axis=1))[0])
                raise ValidationError(
                    f"face {bad} references vertex {faces[bad].max()} but mesh has {n} vertices"
                )
            degenerate = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            )
            if degenerate.any():
                raise ValidationError(
                    f"face {int(np.flatnonzero(degenerate)[0])} has repeated vertex indices"
                )
        normals = self.normals
        if normals is not None:
            normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            if normals.shape[0] != n:
                raise ValidationError("normals count does not match vertex count")
            norms = np.linalg.norm(normals, axis=1)
            if normals.size and np.abs(norms - 1.0).max() > NORMAL_TOL:
                raise ValidationError("vertex normals are not unit length")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != n:
                raise ValidationError("labels count does not match vertex count")
            if labels.size and labels.min() < 1:
                raise ValidationError("labels must be 1-based class indices")
        for arr in (vertices, faces, normals, labels):
            if arr is not None:
                arr.setflags(write=False)
        self.vertices = vertices
        self.faces = faces
        self.normals = normals
        self.labels = labels

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]


@dataclass
class GeodesicField:
    """Distances from one source vertex along the mesh edge graph."""

    source: int
    distances: np.ndarray  # (N,) nonnegative, +inf where unreachable

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if not (0 <= self.source < self.distances.shape[0]):
            raise ValidationError("geodesic source index out of range")
        if self.distances[self.source] != 0.0:
            raise ValidationError("geodesic distance at the source must be 0")
        finite = self.distances[np.isfinite(self.distances)]
        if finite.size and finite.min() < 0:
            raise ValidationError("geodesic distances must be nonnegative")


def edges(mesh: Mesh) -> np.ndarray:
    """Unique undirected edges as a sorted (E, 2) index array."""
    f = mesh.faces
    if f.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def edge_lengths(mesh: Mesh, edge_array: np.ndarray | None = None) -> np.ndarray:
    e = edges(mesh) if edge_array is None else edge_array
    return np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)


def face_areas(mesh: Mesh) -> np.ndarray:
    corners = mesh.vertices[mesh.faces]
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def vertex_areas(mesh: Mesh) -> np.ndarray:
    """One third of the incident-face area sum per vertex (0 for orphans)."""
    areas = face_areas(mesh)
    out = np.zeros(mesh.num_vertices)
    for k in range(3):
        np.add.at(out, mesh.faces[:, k], areas / 3.0)
    return out


def bounding_sphere(mesh: Mesh) -> tuple[np.ndarray, float]:
    """Sphere centered at the vertex centroid covering every vertex."""
    if mesh.num_vertices == 0:
        raise ValidationError("empty mesh has no bounding sphere")
    center = mesh.vertices.mean(axis=0)
    radius = float(np.linalg.norm(mesh.vertices - center, axis=1).max())
    return center, radius


def mesh_diameter(mesh: Mesh) -> float:
    return 2.0 * bounding_sphere(mesh)[1]


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted vertex normals following face winding.

    Each normal is the normalized sum of incident-face normals weighted by
    face area. Vertices without any incident face are an error; datasets with
    orphan vertices must be cleaned explicitly before calling this.
    """
    if mesh.num_faces == 0:
        raise ValidationError("vertex_normals requires a mesh with at least one face")
    corners = mesh.vertices[mesh.faces]
    # cross product = 2 * area * unit face normal, so summing it is area weighting
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    acc = np.zeros((mesh.num_vertices, 3))
    incident = np.zeros(mesh.num_vertices, dtype=np.int64)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], cross)
        np.add.at(incident, mesh.faces[:, k], 1)
    orphans = np.flatnonzero(incident == 0)
    if orphans.size:
        raise ValidationError(
            f"vertices with no incident face: {orphans[:20].tolist()}"
            + ("..." if orphans.size > 20 else "")
        )
    norms = np.linalg.norm(acc, axis=1)
    degenerate = np.flatnonzero(norms < 1e-300)
    if degenerate.size:
        raise ValidationError(
            f"degenerate normal (incident faces cancel) at vertices {degenerate[:20].tolist()}"
        )
    return acc / norms[:, None]


def _edge_graph(mesh: Mesh) -> csr_matrix:
    e = edges(mesh)
    w = edge_lengths(mesh, e)
    n = mesh.num_vertices
    row = np.concatenate([e[:, 0], e[:, 1]])
    col = np.concatenate([e[:, 1], e[:, 0]])
    return csr_matrix((np.concatenate([w, w]), (row, col)), shape=(n, n))


def geodesic_distances(
    mesh: Mesh,
    source: int,
    cutoff: float | None = None,
    *,
    normalize: bool = False,
) -> GeodesicField:
    """Shortest-path distances over the edge graph with Euclidean weights.

    This is the graph-geodesic approximation: exact polyhedral geodesics are
    out of scope. Distances beyond ``cutoff`` (model units, applied before any
    normalization) are reported as +inf, as are unreachable vertices.
    ``normalize=True`` divides by the mesh diameter (twice the bounding-sphere
    radius) so distances become scale-free.
    """
    if not (0 <= source < mesh.num_vertices):
        raise ValidationError(f"source {source} out of range for {mesh.num_vertices} vertices")
    graph = _edge_graph(mesh)
    limit = np.inf if cutoff is None else float(cutoff)
    dist = dijkstra(graph, directed=False, indices=source, limit=limit)
    dist = np.asarray(dist, dtype=np.float64)
    dist[source] = 0.0
    if normalize:
        dist = dist / mesh_diameter(mesh)
    return GeodesicField(source=source, distances=dist)


def geodesic_matrix(mesh: Mesh, cutoff: float | None = None) -> np.ndarray:
    """All-pairs graph-geodesic distances, symmetrized, +inf where unreachable."""
    graph = _edge_graph(mesh)
    limit = np.inf if cutoff is None else float(cutoff)
    dist = dijkstra(graph, directed=False, limit=limit)
    dist = np.asarray(dist, dtype=np.float64)
    np.fill_diagonal(dist, 0.0)
    # floating-point path sums can differ per direction; keep the smaller
    return np.minimum(dist, dist.T)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

_PLY_STRUCT = {
    "char": "b", "int8": "b",
    "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i",
    "uint": "I", "uint32": "I",
    "float": "f", "float32": "f",
    "double": "d", "float64": "d",
}
_PLY_INT_TYPES = {"char", "int8", "uchar", "uint8", "short", "int16", "ushort",
                  "uint16", "int", "int32", "uint", "uint32"}


@dataclass
class _PlyProperty:
    name: str
    kind: str  # "scalar" or "list"
    value_type: str
    count_type: str | None = None


@dataclass
class _PlyElement:
    name: str
    count: int
    properties: list


def _detect_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return "ply"
    if suffix == ".obj":
        return "obj"
    raise ValidationError(f"cannot infer mesh format from suffix {suffix!r}; pass format=")


def load_mesh(path, format: str | None = None) -> Mesh:
    """Load a mesh from PLY (ASCII or binary little-endian) or OBJ.

    PLY: positions come from float vertex properties x, y, z; an integer
    vertex property named "label" populates per-vertex labels; nx, ny, nz
    populate normals. OBJ: only v/f records are parsed; labels come from an
    optional JSON sidecar ``<stem>.labels.json`` holding ``{"labels": [...]}``.
    """
    path = Path(path)
    fmt = format or _detect_format(path)
    if fmt == "ply":
        return _load_ply(path)
    if fmt == "obj":
        return _load_obj(path)
    raise ValidationError(f"unsupported mesh format {fmt!r}")


def _parse_ply_header(path, data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError(path, "not a PLY file (missing ply/end_header)", line=1)
    newline = data.find(b"\n", end)
    if newline < 0:
        raise MeshFormatError(path, "header not terminated", offset=len(data))
    body_offset = newline + 1
    header_lines = data[:body_offset].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[_PlyElement] = []
    for lineno, raw in enumerate(header_lines, start=1):
        tokens = raw.strip().split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise MeshFormatError(path, f"unsupported PLY format {raw.strip()!r}", line=lineno)
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise MeshFormatError(path, "malformed element declaration", line=lineno)
            try:
                count = int(tokens[2])
            except ValueError:
                raise MeshFormatError(path, f"bad element count {tokens[2]!r}", line=lineno)
            elements.append(_PlyElement(tokens[1], count, []))
        elif tokens[0] == "property":
            if not elements:
                raise MeshFormatError(path, "property before any element", line=lineno)
            if len(tokens) >= 2 and tokens[1] == "list":
                if len(tokens) != 5 or tokens[2] not in _PLY_STRUCT or tokens[3] not in _PLY_STRUCT:
                    raise MeshFormatError(path, "malformed list property", line=lineno)
                elements[-1].properties.append(
                    _PlyProperty(tokens[4], "list", tokens[3], tokens[2])
                )
            else:
                if len(tokens) != 3 or tokens[1] not in _PLY_STRUCT:
                    raise MeshFormatError(path, f"malformed property {raw.strip()!r}", line=lineno)
                elements[-1].properties.append(_PlyProperty(tokens[2], "scalar", tokens[1]))
        else:
            raise MeshFormatError(path, f"unknown header keyword {tokens[0]!r}", line=lineno)
    if fmt is None:
        raise MeshFormatError(path, "missing format declaration", line=1)
    return fmt, elements, body_offset, len(header_lines)


def _load_ply(path: Path) -> Mesh:
    data = path.read_bytes()
    fmt, elements, body_offset, header_line_count = _parse_ply_header(path, data)
    if fmt == "ascii":
        parsed = _read_ply_ascii(path, data, elements, body_offset, header_line_count)
    else:
        parsed = _read_ply_binary(path, data, elements, body_offset)
    return _assemble_ply_mesh(path, parsed)


def _read_ply_ascii(path, data, elements, body_offset, header_line_count):
    text = data[body_offset:].decode("ascii", errors="replace")
    lines = text.splitlines()
    parsed = {}
    cursor = 0
    for element in elements:
        columns = {p.name: [] for p in element.properties}
        for i in range(element.count):
            lineno = header_line_count + cursor + 1
            if cursor >= len(lines):
                raise MeshFormatError(
                    path, f"unexpected end of file in element {element.name!r}", line=lineno
                )
            tokens = lines[cursor].split()
            cursor += 1
            pos = 0
            for prop in element.properties:
                try:
                    if prop.kind == "scalar":
                        value = float(tokens[pos])
                        if prop.value_type in _PLY_INT_TYPES:
                            value = int(tokens[pos])
                        pos += 1
                    else:
                        count = int(tokens[pos])
                        value = [int(float(t)) for t in tokens[pos + 1 : pos + 1 + count]]
                        if len(value) != count:
                            raise IndexError
                        pos += 1 + count
                except (ValueError, IndexError):
                    raise MeshFormatError(
                        path, f"cannot parse {element.name!r} record", line=lineno
                    )
                columns[prop.name].append(value)
            if pos != len(tokens):
                raise MeshFormatError(path, "trailing tokens on record", line=lineno)
        parsed[element.name] = (element, columns)
    return parsed


def _read_ply_binary(path, data, elements, body_offset):
    offset = body_offset
    parsed = {}
    for element in elements:
        columns = {p.name: [] for p in element.properties}
        for _ in range(element.count):
            for prop in element.properties:
                try:
                    if prop.kind == "scalar":
                        code = "<" + _PLY_STRUCT[prop.value_type]
                        (value,) = struct.unpack_from(code, data, offset)
                        offset += struct.calcsize(code)
                    else:
                        ccode = "<" + _PLY_STRUCT[prop.count_type]
                        (count,) = struct.unpack_from(ccode, data, offset)
                        offset += struct.calcsize(ccode)
                        icode = "<" + str(int(count)) + _PLY_STRUCT[prop.value_type]
                        value = list(struct.unpack_from(icode, data, offset))
                        offset += struct.calcsize(icode)
                except struct.error:
                    raise MeshFormatError(
                        path,
                        f"unexpected end of data in element {element.name!r}",
                        offset=offset,
                    )
                columns[prop.name].append(value)
        parsed[element.name] = (element, columns)
    return parsed


def _assemble_ply_mesh(path, parsed) -> Mesh:
    if "vertex" not in parsed:
        raise MeshFormatError(path, "no vertex element")
    _, vcols = parsed["vertex"]
    for axis in ("x", "y", "z"):
        if axis not in vcols:
            raise MeshFormatError(path, f"vertex element lacks property {axis!r}")
    vertices = np.column_stack([vcols["x"], vcols["y"], vcols["z"]]).astype(np.float64)
    normals = None
    if all(k in vcols for k in ("nx", "ny", "nz")):
        normals = np.column_stack([vcols["nx"], vcols["ny"], vcols["nz"]]).astype(np.float64)
    labels = None
    if "label" in vcols:
        labels = np.asarray(vcols["label"], dtype=np.int64)
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in parsed:
        element, fcols = parsed["face"]
        list_props = [p for p in element.properties if p.kind == "list"]
        if not list_props:
            raise MeshFormatError(path, "face element has no index list property")
        rows = fcols[list_props[0].name]
        for i, row in enumerate(rows):
            if len(row) != 3:
                raise MeshFormatError(path, f"face {i} has {len(row)} vertices, expected 3")
        faces = np.asarray(rows, dtype=np.int64).reshape(-1, 3) if rows else faces
    return Mesh(vertices=vertices, faces=faces, normals=normals, labels=labels)


def _load_obj(path: Path) -> Mesh:
    vertices = []
    faces = []
    try:
        text = path.read_text()
    except UnicodeDecodeError:
        raise MeshFormatError(path, "OBJ file is not valid text", line=1)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if tokens[0] == "v":
            if len(tokens) < 4:
                raise MeshFormatError(path, "vertex record needs 3 coordinates", line=lineno)
            try:
                vertices.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise MeshFormatError(path, "cannot parse vertex coordinates", line=lineno)
        elif tokens[0] == "f":
            if len(tokens) != 4:
                raise MeshFormatError(path, "only triangular faces are supported", line=lineno)
            idx = []
            for t in tokens[1:]:
                head = t.split("/")[0]
                try:
                    value = int(head)
                except ValueError:
                    raise MeshFormatError(path, f"cannot parse face index {t!r}", line=lineno)
                idx.append(value - 1 if value > 0 else len(vertices) + value)
            faces.append(idx)
        # all other records (vn, vt, g, o, s, usemtl, mtllib) are ignored
    labels = None
    sidecar = path.with_suffix(".labels.json")
    if sidecar.exists():
        payload = json.loads(sidecar.read_text())
        labels = np.asarray(payload["labels"], dtype=np.int64)
        if labels.shape[0] != len(vertices):
            raise ValidationError(
                f"{sidecar}: {labels.shape[0]} labels for {len(vertices)} vertices"
            )
    return Mesh(
        vertices=np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        labels=labels,
    )


def save_mesh(
    mesh: Mesh,
    path,
    format: str | None = None,
    *,
    binary: bool = False,
    colors: np.ndarray | None = None,
) -> None:
    """Write a mesh to PLY or OBJ.

    PLY positions (and normals) are written as double properties so that
    load/save round-trips are exact. ``colors`` (N, 3) uint8 adds red/green/
    blue vertex properties (PLY only). Labels, when present, are written as an
    int vertex property (PLY) or a JSON sidecar (OBJ).
    """
    path = Path(path)
    fmt = format or _detect_format(path)
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        if colors.shape[0] != mesh.num_vertices:
            raise ValidationError("colors count does not match vertex count")
    if fmt == "ply":
        _save_ply(mesh, path, binary=binary, colors=colors)
    elif fmt == "obj":
        _save_obj(mesh, path)
    else:
        raise ValidationError(f"unsupported mesh format {fmt!r}")


def _ply_header(mesh: Mesh, binary: bool, colors) -> str:
    lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    lines.append(f"element vertex {mesh.num_vertices}")
    for axis in "xyz":
        lines.append(f"property double {axis}")
    if mesh.normals is not None:
        for axis in ("nx", "ny", "nz"):
            lines.append(f"property double {axis}")
    if colors is not None:
        for channel in ("red", "green", "blue"):
            lines.append(f"property uchar {channel}")
    if mesh.labels is not None:
        lines.append("property int label")
    lines.append(f"element face {mesh.num_faces}")
    lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    return "\n".join(lines) + "\n"


def _save_ply(mesh: Mesh, path: Path, *, binary: bool, colors) -> None:
    header = _ply_header(mesh, binary, colors)
    if binary:
        chunks = [header.encode("ascii")]
        for i in range(mesh.num_vertices):
            row = struct.pack("<3d", *mesh.vertices[i])
            if mesh.normals is not None:
                row += struct.pack("<3d", *mesh.normals[i])
            if colors is not None:
                row += struct.pack("<3B", *colors[i])
            if mesh.labels is not None:
                row += struct.pack("<i", int(mesh.labels[i]))
            chunks.append(row)
        for f in mesh.faces:
            chunks.append(struct.pack("<B3i", 3, *f))
        path.write_bytes(b"".join(chunks))
        return
    out = [header]
    for i in range(mesh.num_vertices):
        parts = [f"{c:.17g}" for c in mesh.vertices[i]]
        if mesh.normals is not None:
            parts += [f"{c:.17g}" for c in mesh.normals[i]]
        if colors is not None:
            parts += [str(int(c)) for c in colors[i]]
        if mesh.labels is not None:
            parts.append(str(int(mesh.labels[i])))
        out.append(" ".join(parts) + "\n")
    for f in mesh.faces:
        out.append(f"3 {f[0]} {f[1]} {f[2]}\n")
    path.write_text("".join(out))


def _save_obj(mesh: Mesh, path: Path) -> None:
    out = []
    for v in mesh.vertices:
        out.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
    for f in mesh.faces:
        out.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    path.write_text("".join(out))
    if mesh.labels is not None:
        sidecar = path.with_suffix(".labels.json")
        sidecar.write_text(json.dumps({"labels": mesh.labels.tolist()}))
