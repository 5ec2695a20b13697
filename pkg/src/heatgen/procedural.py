"""Procedural test meshes: grids, spheres, platonic solids.

Used by the test suite, the synthetic pipeline fixtures, and docs. All
generators are deterministic.
"""

import numpy as np

from .mesh import Mesh

__all__ = ["make_grid", "make_icosphere", "make_tetrahedron", "make_uv_sphere"]


def make_grid(nx, ny, scale=1.0, height_fn=None):
    """Triangulated planar grid of nx*ny vertices in the z=0 plane.

    ``height_fn(x, y) -> z`` optionally displaces the grid; vertices span
    [0, scale] x [0, scale * (ny-1)/(nx-1)].
    """
    xs = np.linspace(0.0, scale, nx)
    ys = np.linspace(0.0, scale * (ny - 1) / (nx - 1), ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    gz = height_fn(gx, gy) if height_fn is not None else np.zeros_like(gx)
    verts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    idx = np.arange(nx * ny).reshape(nx, ny)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    # CCW when viewed from +z
    faces = np.concatenate([
        np.stack([a, b, c], axis=1),
        np.stack([a, c, d], axis=1),
    ])
    return Mesh(verts, faces)


def make_tetrahedron(scale=1.0):
    """Regular tetrahedron, outward CCW winding; every edge borders 2 faces."""
    verts = scale / np.sqrt(3.0) * np.array([
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ])
    faces = np.array([
        [0, 1, 2],
        [0, 3, 1],
        [0, 2, 3],
        [1, 3, 2],
    ])
    return Mesh(verts, faces)


def make_icosphere(subdivisions=2, radius=1.0):
    """Icosahedron subdivided ``subdivisions`` times, projected to a sphere.

    Vertex count is 10 * 4**subdivisions + 2 (12, 42, 162, 642, 2562, ...).
    """
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        midpoint_cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint_cache:
                p = np.array(verts[i]) + np.array(verts[j])
                p /= np.linalg.norm(p)
                verts.append(tuple(p))
                midpoint_cache[key] = len(verts) - 1
            return midpoint_cache[key]

        for (a, b, c) in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(radius * np.array(verts), np.array(faces))


def make_uv_sphere(rings, segments, radius=1.0):
    """Latitude/longitude sphere with rings*segments + 2 vertices.

    Handy when a specific vertex count is needed (e.g. rings=20, segments=25
    gives 502 vertices).
    """
    verts = [np.array([0.0, 0.0, radius])]
    for i in range(1, rings + 1):
        theta = np.pi * i / (rings + 1)
        for j in range(segments):
            phi = 2.0 * np.pi * j / segments
            verts.append(radius * np.array([
                np.sin(theta) * np.cos(phi),
                np.sin(theta) * np.sin(phi),
                np.cos(theta),
            ]))
    verts.append(np.array([0.0, 0.0, -radius]))
    south = len(verts) - 1

    def ring_vertex(i, j):
        return 1 + (i - 1) * segments + (j % segments)

    faces = []
    for j in range(segments):
        faces.append((0, ring_vertex(1, j), ring_vertex(1, j + 1)))
    for i in range(1, rings):
        for j in range(segments):
            a = ring_vertex(i, j)
            b = ring_vertex(i, j + 1)
            c = ring_vertex(i + 1, j)
            d = ring_vertex(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    for j in range(segments):
        faces.append((south, ring_vertex(rings, j + 1), ring_vertex(rings, j)))
    return Mesh(np.array(verts), np.array(faces))
