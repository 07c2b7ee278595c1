"""Mesh-geodesic benchmark.

Triangle meshes (OBJ or a bundled procedural icosphere), graph-geodesic
distances, waypoint marginals sampled with an area-times-Gaussian-falloff
face distribution, orthonormal high-dimensional embedding, and exact
point-to-surface deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .transport import MarginalSequence
from .validation import as_matrix, check_positive

__all__ = [
    "Mesh",
    "load_obj",
    "save_obj",
    "make_icosphere",
    "mesh_geodesic_distances",
    "geodesic_path",
    "select_waypoints",
    "sample_mesh_marginals",
    "orthonormal_embed",
    "project_back",
    "surface_deviation",
    "MeshBenchConfig",
    "generate_mesh_benchmark",
]

# Falloff-to-path-length ratio of the reference benchmark (30 mesh units
# of falloff on a ~818-unit geodesic path).
FALLOFF_PATH_RATIO = 30.0 / 818.0


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = as_matrix(self.vertices, "vertices")
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if self.faces.min() < 0 or self.faces.max() >= self.vertices.shape[0]:
            raise ValueError("face vertex index out of range")

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def face_corners(self):
        return self.vertices[self.faces]  # (F, 3, 3)

    def face_areas(self):
        c = self.face_corners()
        cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def face_centroids(self):
        return self.face_corners().mean(axis=1)


def load_obj(path) -> Mesh:
    """Parse v/f records; polygon faces are fan-triangulated."""
    verts = []
    faces = []
    with open(path, encoding="utf-8") as fh:
        for ln_no, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{ln_no}: vertex needs 3 coordinates")
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ValueError(f"{path}:{ln_no}: face needs at least 3 vertices")
                for j in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
    if not verts or not faces:
        raise ValueError(f"{path}: no usable v/f records")
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.min() < 0 or faces.max() >= verts.shape[0]:
        raise ValueError(f"{path}: face vertex index out of range")
    return Mesh(verts, faces)


def save_obj(path, mesh: Mesh):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def make_icosphere(subdivisions=3, radius=1.0) -> Mesh:
    """Subdivided icosahedron projected onto a sphere; the bundled test
    manifold for the benchmark."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v / np.linalg.norm(v) for v in verts]
    for _ in range(int(subdivisions)):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.asarray(verts) * radius, np.asarray(faces, dtype=np.int64))


def _edge_graph(mesh: Mesh):
    f = mesh.faces
    edges = np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)  # shared edges once
    lengths = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    n = mesh.n_vertices
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    data = np.concatenate([lengths, lengths])
    return coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


def mesh_geodesic_distances(mesh: Mesh, source_vertex, return_predecessors=False):
    """Shortest-path distances over the edge graph with Euclidean weights."""
    graph = _edge_graph(mesh)
    out = dijkstra(graph, indices=int(source_vertex), return_predecessors=return_predecessors)
    return out


def geodesic_path(mesh: Mesh, start, end):
    """Vertex chain of the start -> end shortest path with cumulative lengths."""
    _, pred = mesh_geodesic_distances(mesh, start, return_predecessors=True)
    path = [int(end)]
    while path[-1] != int(start):
        p = pred[path[-1]]
        if p < 0:
            raise ValueError("mesh is disconnected between the chosen endpoints")
        path.append(int(p))
    path.reverse()
    pts = mesh.vertices[path]
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return np.asarray(path), cum


def select_waypoints(mesh: Mesh, progress):
    """Waypoint vertices at the given geodesic-progress values.

    The start vertex is the farthest from (the vertex nearest) the
    centroid; the end vertex is the farthest from the start; waypoints are
    the path vertices whose cumulative length is closest to each target.
    """
    centroid = mesh.vertices.mean(axis=0)
    near_c = int(np.argmin(np.linalg.norm(mesh.vertices - centroid, axis=1)))
    d_c = mesh_geodesic_distances(mesh, near_c)
    start = int(np.argmax(d_c))
    d_s = mesh_geodesic_distances(mesh, start)
    end = int(np.argmax(d_s))
    path, cum = geodesic_path(mesh, start, end)
    total = cum[-1]
    waypoints = []
    for s in progress:
        waypoints.append(int(path[np.argmin(np.abs(cum - s * total))]))
    return waypoints, total


def sample_mesh_marginals(mesh: Mesh, waypoints, n_samples, falloff, rng):
    """One on-surface sample set per waypoint.

    Faces are drawn with probability proportional to area times a Gaussian
    falloff in geodesic distance (taken at the face corner nearest the
    centroid); points are uniform in barycentric coordinates.
    """
    check_positive(n_samples, "n_samples")
    check_positive(falloff, "falloff")
    areas = mesh.face_areas()
    corners = mesh.face_corners()
    centroids = mesh.face_centroids()
    corner_d = np.linalg.norm(corners - centroids[:, None, :], axis=2)
    nearest_corner = np.argmin(corner_d, axis=1)
    face_vertex = mesh.faces[np.arange(mesh.n_faces), nearest_corner]

    out = []
    for w in waypoints:
        dist = mesh_geodesic_distances(mesh, w)
        d_face = dist[face_vertex]
        weights = areas * np.exp(-0.5 * (d_face / falloff) ** 2)
        p = weights / weights.sum()
        chosen = rng.choice(mesh.n_faces, size=int(n_samples), p=p)
        u = rng.uniform(size=n_samples)
        v = rng.uniform(size=n_samples)
        flip = u + v > 1.0
        u[flip] = 1.0 - u[flip]
        v[flip] = 1.0 - v[flip]
        tri = corners[chosen]
        pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
        out.append(pts)
    return out


def orthonormal_embed(points, dim, seed):
    """Map 3D points into R^dim by a seeded orthonormal-row matrix.

    QR of a seeded Gaussian (dim, 3) matrix gives the basis; returns
    (embedded points, embedding matrix A with A A^T = I).
    """
    X = as_matrix(points, "points")
    if X.shape[1] != 3:
        raise ValueError("points must be 3D")
    dim = int(dim)
    if dim < 3:
        raise ValueError("embedding dimension must be >= 3")
    g = np.random.default_rng(seed).standard_normal((dim, 3))
    q, _ = np.linalg.qr(g)
    A = q[:, :3].T  # (3, dim), orthonormal rows
    return X @ A, A


def project_back(points, A):
    """Pseudoinverse projection back to 3D."""
    Y = as_matrix(points, "points")
    return Y @ np.linalg.pinv(A)


def _point_triangle_sqdist(P, a, b, c):
    """Squared distance from points (N,3) to one triangle (a, b, c)."""
    e0 = b - a
    e1 = c - a
    n = np.cross(e0, e1)
    nn = n @ n
    rel = P - a
    best = np.full(P.shape[0], np.inf)
    if nn > 0:
        # interior candidate: project onto the plane, keep if inside
        dist_plane = rel @ n / np.sqrt(nn)
        proj = rel - dist_plane[:, None] * (n / np.sqrt(nn))
        d00 = e0 @ e0
        d01 = e0 @ e1
        d11 = e1 @ e1
        denom = d00 * d11 - d01 * d01
        pu = proj @ e0
        pv = proj @ e1
        u = (d11 * pu - d01 * pv) / denom
        v = (d00 * pv - d01 * pu) / denom
        inside = (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
        best = np.where(inside, dist_plane**2, best)
    for q0, q1 in ((a, b), (b, c), (c, a)):
        e = q1 - q0
        ee = e @ e
        if ee <= 0:
            cand = np.sum((P - q0) ** 2, axis=1)
        else:
            t = np.clip((P - q0) @ e / ee, 0.0, 1.0)
            cand = np.sum((P - q0 - t[:, None] * e) ** 2, axis=1)
        best = np.minimum(best, cand)
    return best


def surface_deviation(points, mesh: Mesh):
    """Mean absolute distance from the points to the mesh surface (exact
    point-to-triangle, brute force over faces)."""
    P = as_matrix(points, "points")
    corners = mesh.face_corners()
    best = np.full(P.shape[0], np.inf)
    for f in range(mesh.n_faces):
        a, b, c = corners[f]
        best = np.minimum(best, _point_triangle_sqdist(P, a, b, c))
    return float(np.mean(np.sqrt(best)))


@dataclass
class MeshBenchConfig:
    mesh_path: str = None  # None -> bundled icosphere
    subdivisions: int = 3
    radius: float = 1.0
    progress: tuple = (0.0, 0.14, 0.29, 0.43, 0.57, 0.71, 0.86, 1.0)
    falloff: float = None  # None -> path-length rule
    samples_per_marginal: int = 400
    embed_dim: int = 3
    embed_seed: int = 0
    held_out: tuple = (1, 6)


def generate_mesh_benchmark(cfg: MeshBenchConfig, rng):
    """Build the embedded marginal sequence for one ambient dimension.

    Returns (sequence, mesh, embedding matrix A, 3D marginals).
    """
    if cfg.mesh_path is not None:
        mesh = load_obj(cfg.mesh_path)
    else:
        mesh = make_icosphere(cfg.subdivisions, cfg.radius)
    waypoints, total = select_waypoints(mesh, cfg.progress)
    falloff = cfg.falloff if cfg.falloff is not None else FALLOFF_PATH_RATIO * total
    marginals3d = sample_mesh_marginals(mesh, waypoints, cfg.samples_per_marginal, falloff, rng)
    embedded = []
    A = None
    for pts in marginals3d:
        emb, A = orthonormal_embed(pts, cfg.embed_dim, cfg.embed_seed)
        embedded.append(emb)
    seq = MarginalSequence(embedded)
    return seq, mesh, A, marginals3d
