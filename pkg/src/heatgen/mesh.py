"""Triangle mesh kernel: loading, validation, adjacency, normals, tangent frames.

Meshes are immutable after construction; every downstream operator (Laplacian
assembly, gradient fitting, baking) consumes the indexed structure built here.
"""

import hashlib
import struct
import warnings
from pathlib import Path

import numpy as np

__all__ = [
    "Mesh",
    "MeshLoadError",
    "TangentFrame",
    "compute_tangent_frames",
    "compute_vertex_normals",
    "load_mesh",
    "save_ply",
]


class MeshLoadError(ValueError):
    """Raised when a mesh file cannot be parsed or violates basic validity."""


class Mesh:
    """Indexed triangle mesh.

    Parameters
    ----------
    vertices : (n, 3) float array
        Vertex positions.
    faces : (m, 3) int array
        Counterclockwise vertex indices per triangle.

    Attributes
    ----------
    vertices : (n, 3) float64, read-only
    faces : (m, 3) int64, read-only
    face_areas : (m,) float64
        Half the cross-product magnitude per face (>= 0).
    """

    def __init__(self, vertices, faces):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshLoadError(f"vertices must be (n, 3), got {vertices.shape}")
        if faces.size and (faces.ndim != 2 or faces.shape[1] != 3):
            raise MeshLoadError(f"faces must be (m, 3), got {faces.shape}")
        faces = faces.reshape(-1, 3)
        n = len(vertices)
        if faces.size:
            if faces.min() < 0 or faces.max() >= n:
                raise MeshLoadError(
                    f"face index out of range [0, {n}): "
                    f"min {faces.min()}, max {faces.max()}"
                )
            degenerate = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            )
            if degenerate.any():
                bad = int(np.flatnonzero(degenerate)[0])
                raise MeshLoadError(f"face {bad} repeats a vertex index: {faces[bad]}")

        self.vertices = vertices
        self.faces = faces
        self.face_areas = _face_areas(vertices, faces)
        self._adj_indptr, self._adj_indices = _build_adjacency(n, faces)
        self._vf_indptr, self._vf_indices = _build_vertex_faces(n, faces)
        self._check_edge_manifold()

        for arr in (self.vertices, self.faces, self.face_areas,
                    self._adj_indptr, self._adj_indices,
                    self._vf_indptr, self._vf_indices):
            arr.flags.writeable = False
        self._hash = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def neighbors(self, i):
        """One-ring neighbor indices of vertex ``i``, ascending."""
        return self._adj_indices[self._adj_indptr[i]:self._adj_indptr[i + 1]]

    @property
    def adjacency_csr(self):
        """One-ring adjacency in CSR form: (indptr, indices)."""
        return self._adj_indptr, self._adj_indices

    def vertex_faces(self, i):
        """Indices of faces incident to vertex ``i``."""
        return self._vf_indices[self._vf_indptr[i]:self._vf_indptr[i + 1]]

    @property
    def vertex_adjacency(self):
        """List of one-ring neighbor arrays, one per vertex."""
        return [self.neighbors(i) for i in range(self.n_vertices)]

    @property
    def total_area(self):
        return float(self.face_areas.sum())

    @property
    def content_hash(self):
        """SHA-256 over vertex and face bytes; identifies the mesh geometry."""
        if self._hash is None:
            h = hashlib.sha256()
            h.update(self.vertices.tobytes())
            h.update(self.faces.tobytes())
            self._hash = h.digest()
        return self._hash

    @property
    def mesh_id(self):
        return self.content_hash.hex()

    def mean_edge_length(self):
        v, f = self.vertices, self.faces
        e = np.concatenate([
            v[f[:, 1]] - v[f[:, 0]],
            v[f[:, 2]] - v[f[:, 1]],
            v[f[:, 0]] - v[f[:, 2]],
        ])
        return float(np.linalg.norm(e, axis=1).mean())

    def _check_edge_manifold(self):
        if not len(self.faces):
            self.nonmanifold_edges = np.zeros((0, 2), dtype=np.int64)
            return
        edges = np.sort(
            self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1
        )
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        # > 2 incident faces: retained, downstream cotangent assembly sums
        # contributions from every incident face.
        self.nonmanifold_edges = uniq[counts > 2]
        if len(self.nonmanifold_edges):
            warnings.warn(
                f"{len(self.nonmanifold_edges)} non-manifold edge(s) "
                "(more than 2 incident faces); contributions will be summed",
                stacklevel=3,
            )

    @property
    def is_edge_manifold(self):
        return len(self.nonmanifold_edges) == 0

    def __repr__(self):
        return f"Mesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"


class TangentFrame:
    """Per-vertex orthonormal frames (X, Y, N) with N the vertex normal.

    X and Y span the tangent plane and X x Y = N (right-handed). All three
    arrays are (n, 3) float64 and read-only.
    """

    def __init__(self, x_axes, y_axes, normals):
        self.x_axes = np.ascontiguousarray(x_axes, dtype=np.float64)
        self.y_axes = np.ascontiguousarray(y_axes, dtype=np.float64)
        self.normals = np.ascontiguousarray(normals, dtype=np.float64)
        for arr in (self.x_axes, self.y_axes, self.normals):
            arr.flags.writeable = False

    def __len__(self):
        return len(self.normals)


def _face_areas(vertices, faces):
    if not len(faces):
        return np.zeros(0, dtype=np.float64)
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def _build_adjacency(n, faces):
    if not len(faces):
        return np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    edges = faces[:, [0, 1, 1, 2, 2, 0, 1, 0, 2, 1, 0, 2]].reshape(-1, 2)
    edges = np.unique(edges, axis=0)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, edges[:, 0] + 1, 1)
    np.cumsum(indptr, out=indptr)
    # edges are sorted lexicographically by np.unique, so per-vertex
    # neighbor lists come out ascending.
    return indptr, edges[:, 1].copy()


def _build_vertex_faces(n, faces):
    if not len(faces):
        return np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    vert = faces.reshape(-1)
    face_idx = np.repeat(np.arange(len(faces), dtype=np.int64), 3)
    order = np.argsort(vert, kind="stable")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, vert + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, face_idx[order]


def compute_vertex_normals(mesh):
    """Area-weighted vertex normals, unit length.

    The unnormalized face cross product already carries the 2*area weight,
    so accumulating it per vertex and normalizing gives the area-weighted
    average of incident face normals. Zero-area faces contribute nothing.

    Raises
    ------
    ValueError
        If a vertex has no incident face, or all incident faces are
        degenerate (no direction can be assigned).
    """
    v, f = mesh.vertices, mesh.faces
    acc = np.zeros_like(v)
    if len(f):
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        np.add.at(acc, f[:, 0], cross)
        np.add.at(acc, f[:, 1], cross)
        np.add.at(acc, f[:, 2], cross)
    norms = np.linalg.norm(acc, axis=1)
    bad = np.flatnonzero(norms <= 1e-300)
    if len(bad):
        i = int(bad[0])
        if len(mesh.vertex_faces(i)) == 0:
            raise ValueError(f"vertex {i} has no incident faces; cannot assign a normal")
        raise ValueError(f"vertex {i}: all incident faces degenerate; cannot assign a normal")
    return acc / norms[:, None]


def compute_tangent_frames(mesh, normals=None):
    """Deterministic orthonormal tangent frames per vertex.

    X is the global x-axis projected into the tangent plane; when the normal
    is within ~8 degrees of the x-axis (|e.N| > 0.99) the global y-axis is
    used instead. Y = N x X completes a right-handed frame.
    """
    if normals is None:
        normals = compute_vertex_normals(mesh)
    normals = np.asarray(normals, dtype=np.float64)
    ex = np.array([1.0, 0.0, 0.0])
    ey = np.array([0.0, 1.0, 0.0])
    seed = np.where(
        (np.abs(normals @ ex) > 0.99)[:, None], ey[None, :], ex[None, :]
    )
    x = seed - (np.sum(seed * normals, axis=1))[:, None] * normals
    x /= np.linalg.norm(x, axis=1)[:, None]
    y = np.cross(normals, x)
    return TangentFrame(x, y, normals)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def load_mesh(path):
    """Load an OBJ or PLY triangle mesh, fan-triangulating polygon faces.

    Vertex order of the file is preserved. Raises MeshLoadError with the
    offending line number on parse failures.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        return _load_ply(path)
    raise MeshLoadError(f"unsupported mesh format '{suffix}' for {path}")


def _fan_triangulate(poly, lineno, path):
    if len(poly) < 3:
        raise MeshLoadError(f"{path}:{lineno}: face with fewer than 3 vertices")
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _load_obj(path):
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshLoadError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise MeshLoadError(f"{path}:{lineno}: bad vertex coordinate: {exc}") from None
            elif tag == "f":
                poly = []
                for token in parts[1:]:
                    idx_str = token.split("/")[0]
                    try:
                        idx = int(idx_str)
                    except ValueError:
                        raise MeshLoadError(f"{path}:{lineno}: bad face index '{token}'") from None
                    if idx < 0:
                        idx = len(verts) + idx  # relative indexing
                    else:
                        idx = idx - 1  # OBJ is 1-based
                    if idx < 0 or idx >= len(verts):
                        raise MeshLoadError(
                            f"{path}:{lineno}: face index {idx_str} out of range"
                        )
                    poly.append(idx)
                faces.extend(_fan_triangulate(poly, lineno, path))
            # vt / vn / usemtl / groups are irrelevant here
    if not verts:
        raise MeshLoadError(f"{path}: no vertices found")
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


_PLY_TYPES = {
    "char": "b", "int8": "b",
    "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i",
    "uint": "I", "uint32": "I",
    "float": "f", "float32": "f",
    "double": "d", "float64": "d",
}


def _load_ply(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise MeshLoadError(f"{path}:1: not a PLY file")
        fmt = None
        elements = []  # (name, count, [properties])
        lineno = 1
        while True:
            line = fh.readline()
            lineno += 1
            if not line:
                raise MeshLoadError(f"{path}:{lineno}: unexpected EOF in header")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
                if fmt not in ("ascii", "binary_little_endian"):
                    raise MeshLoadError(f"{path}:{lineno}: unsupported PLY format '{fmt}'")
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if not elements:
                    raise MeshLoadError(f"{path}:{lineno}: property before element")
                if tokens[1] == "list":
                    elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
                else:
                    elements[-1][2].append(("scalar", tokens[1], tokens[2]))
            elif tokens[0] == "end_header":
                break
            else:
                raise MeshLoadError(f"{path}:{lineno}: unknown header line '{tokens[0]}'")
        if fmt is None:
            raise MeshLoadError(f"{path}: missing PLY format line")
        reader = _read_ply_ascii if fmt == "ascii" else _read_ply_binary
        verts, faces = reader(fh, path, elements)
    if verts is None:
        raise MeshLoadError(f"{path}: no vertex element")
    tri = []
    for lineno, poly in enumerate(faces):
        tri.extend(_fan_triangulate(poly, lineno, path))
    return Mesh(np.array(verts), np.array(tri, dtype=np.int64).reshape(-1, 3))


def _vertex_xyz_columns(props, path):
    names = [p[2] if p[0] == "scalar" else p[3] for p in props]
    try:
        return names.index("x"), names.index("y"), names.index("z")
    except ValueError:
        raise MeshLoadError(f"{path}: vertex element lacks x/y/z properties") from None


def _read_ply_ascii(fh, path, elements):
    verts, faces = None, []
    for name, count, props in elements:
        if name == "vertex":
            ix, iy, iz = _vertex_xyz_columns(props, path)
            verts = np.empty((count, 3), dtype=np.float64)
            for i in range(count):
                vals = fh.readline().split()
                verts[i] = float(vals[ix]), float(vals[iy]), float(vals[iz])
        elif name == "face":
            for _ in range(count):
                vals = fh.readline().split()
                n = int(vals[0])
                faces.append([int(v) for v in vals[1:1 + n]])
        else:
            for _ in range(count):
                fh.readline()
    return verts, faces


def _read_ply_binary(fh, path, elements):
    verts, faces = None, []
    for name, count, props in elements:
        if name == "vertex":
            codes = []
            for p in props:
                if p[0] == "list":
                    raise MeshLoadError(f"{path}: list property in vertex element unsupported")
                codes.append(_PLY_TYPES[p[1]])
            rec = struct.Struct("<" + "".join(codes))
            ix, iy, iz = _vertex_xyz_columns(props, path)
            raw = fh.read(rec.size * count)
            if len(raw) != rec.size * count:
                raise MeshLoadError(f"{path}: truncated vertex data")
            verts = np.empty((count, 3), dtype=np.float64)
            for i, rec_vals in enumerate(rec.iter_unpack(raw)):
                verts[i] = rec_vals[ix], rec_vals[iy], rec_vals[iz]
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise MeshLoadError(f"{path}: face element must be a single list property")
            cnt_fmt = "<" + _PLY_TYPES[props[0][1]]
            idx_code = _PLY_TYPES[props[0][2]]
            cnt_size = struct.calcsize(cnt_fmt)
            idx_size = struct.calcsize("<" + idx_code)
            for _ in range(count):
                (n,) = struct.unpack(cnt_fmt, fh.read(cnt_size))
                idx = struct.unpack("<" + idx_code * n, fh.read(idx_size * n))
                faces.append(list(idx))
        else:
            # skip unknown fixed-size elements
            size = 0
            for p in props:
                if p[0] == "list":
                    raise MeshLoadError(f"{path}: cannot skip list property in element '{name}'")
                size += struct.calcsize("<" + _PLY_TYPES[p[1]])
            fh.read(size * count)
    return verts, faces


def save_ply(mesh, path, vertex_colors=None):
    """Write a binary little-endian PLY, optionally with uchar RGB colors.

    ``vertex_colors`` is an (n, 3) array of uint8, or floats in [0, 1] which
    are quantized as round(clamp(c, 0, 1) * 255).
    """
    path = Path(path)
    n, m = mesh.n_vertices, mesh.n_faces
    colors = None
    if vertex_colors is not None:
        vertex_colors = np.asarray(vertex_colors)
        if vertex_colors.shape != (n, 3):
            raise ValueError(
                f"vertex_colors shape {vertex_colors.shape} != ({n}, 3)"
            )
        if vertex_colors.dtype == np.uint8:
            colors = vertex_colors
        else:
            colors = np.rint(np.clip(vertex_colors, 0.0, 1.0) * 255.0).astype(np.uint8)

    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {m}",
               "property list uchar int vertex_indices",
               "end_header"]

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if colors is not None:
            vrec = np.empty(
                n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)]
            )
            vrec["xyz"] = mesh.vertices.astype(np.float32)
            vrec["rgb"] = colors
        else:
            vrec = mesh.vertices.astype("<f4")
        fh.write(vrec.tobytes())
        frec = np.empty(m, dtype=[("cnt", "u1"), ("idx", "<i4", 3)])
        frec["cnt"] = 3
        frec["idx"] = mesh.faces.astype(np.int32)
        fh.write(frec.tobytes())
    tmp.replace(path)
