"""Marching-cubes mesh extraction from the field at a given time, PLY I/O
and connected-component splitting."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) world
    triangles: np.ndarray  # (F, 3) int
    colors: np.ndarray  # (V, 3) in [0, 1]

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    def __len__(self):
        return len(self.triangles)

    def validate(self) -> None:
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle index out of range")
            t = self.triangles
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ValueError("degenerate triangle")

    def centroid(self) -> np.ndarray:
        """Area-weighted surface centroid."""
        if len(self.triangles) == 0:
            return np.full(3, np.nan)
        p = self.vertices[self.triangles]
        area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
        if area.sum() == 0:
            return p.mean(axis=(0, 1))
        return (p.mean(axis=1) * area[:, None]).sum(axis=0) / area.sum()

    def submesh(self, triangle_ids: np.ndarray) -> "TriMesh":
        tri = self.triangles[triangle_ids]
        used, inverse = np.unique(tri, return_inverse=True)
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3), self.colors[used])


def sdf_lattice(voxmap, field, t: float, cells_per_voxel: int = 4, tr: float = 0.1):
    """SDF on a regular lattice over the allocated bounding box.

    Lattice points that no allocated cell covers get ``+tr``.
    Returns ``(sdf (X, Y, Z), covered (X, Y, Z), origin, pitch)``.
    """
    vs = voxmap.voxel_size
    pitch = vs / cells_per_voxel
    lo = voxmap.indices.min(axis=0) * vs
    hi = voxmap.indices.max(axis=0) * vs
    n = np.round((hi - lo) / pitch).astype(int) + 1
    axes = [lo[k] + pitch * np.arange(n[k]) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    # nudge inward so points on the upper boundary fall into an allocated cell
    emb, covered = voxmap.interpolate(np.minimum(grid, hi - 1e-9 * vs))
    sdf = np.full(len(grid), float(tr))
    if np.any(covered):
        sdf[covered] = field.evaluate(emb[covered], t)[1]
    return sdf.reshape(n), covered.reshape(n), lo, pitch


def extract_mesh(voxmap, field, t: float, cells_per_voxel: int = 4, tr: float = 0.1) -> TriMesh:
    """Zero level set of the SDF at time ``t`` with colours from the colour head."""
    if len(voxmap) == 0:
        raise ValueError("map is empty")
    sdf, _, origin, pitch = sdf_lattice(voxmap, field, t, cells_per_voxel, tr)
    if min(sdf.shape) < 2 or not (sdf.min() < 0 < sdf.max()):
        return TriMesh.empty()
    verts, faces, _, _ = marching_cubes(sdf, level=0.0, spacing=(pitch,) * 3, method="lorensen",
                                        allow_degenerate=False)
    verts = verts + origin
    faces = faces.astype(np.int64)
    # merge coincident vertices (marching cubes emits shared edge points once per cell)
    keyed = np.round(verts / (pitch * 1e-6)).astype(np.int64)
    _, first, inverse = np.unique(keyed, axis=0, return_index=True, return_inverse=True)
    verts = verts[first]
    faces = inverse.reshape(-1)[faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    used, inv = np.unique(faces, return_inverse=True)
    verts, faces = verts[used], inv.reshape(-1, 3)
    emb, covered = voxmap.interpolate(verts)
    colors = np.full((len(verts), 3), 0.5)
    if np.any(covered):
        colors[covered] = field.evaluate(emb[covered], t)[0]
    mesh = TriMesh(verts, faces, colors)
    mesh.validate()
    return mesh


def observed_points(points, frames, poses, intrinsics, tr: float = 0.1) -> np.ndarray:
    """Bool mask of points some frame sees: inside the image, with valid
    depth, and no more than ``tr`` behind the observed surface."""
    from .dataio import project

    points = np.asarray(points, dtype=np.float64)
    seen = np.zeros(len(points), dtype=bool)
    for frame, pose in zip(frames, poses):
        uv, z = project(pose.inverse().apply(points), intrinsics)
        with np.errstate(invalid="ignore"):
            u, v = np.round(uv[:, 0]), np.round(uv[:, 1])
            ok = (z > 0) & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
        d = np.zeros(len(points))
        d[ok] = frame.depth[v[ok].astype(int), u[ok].astype(int)]
        seen |= ok & (d > 0) & (z <= d + tr)
    return seen


def cull_unobserved(mesh: TriMesh, frames, poses, intrinsics, tr: float = 0.1) -> TriMesh:
    """Drop triangles with a vertex no frame observes (surfaces behind walls
    or in never-seen space, which the field only extrapolates)."""
    if len(mesh.triangles) == 0:
        return mesh
    seen = observed_points(mesh.vertices, frames, poses, intrinsics, tr)
    return mesh.submesh(np.flatnonzero(seen[mesh.triangles].all(axis=1)))


def connected_parts(mesh: TriMesh) -> list[np.ndarray]:
    """Triangle index arrays of the connected components, largest first."""
    if len(mesh.triangles) == 0:
        return []
    t = mesh.triangles
    n = len(mesh.vertices)
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    tri_label = labels[t[:, 0]]
    parts = [np.flatnonzero(tri_label == k) for k in np.unique(tri_label)]
    parts.sort(key=lambda p: (-len(p), p[0]))
    return parts


def split_object(mesh: TriMesh, inside) -> tuple[TriMesh, TriMesh]:
    """Split into (object, background).

    ``inside`` maps (N, 3) points to a bool mask of the region the dynamic
    object occupies (e.g. :func:`mask_hull`).  The background is the
    largest component; the object is the other component with the most
    vertices inside the region.
    """
    parts = connected_parts(mesh)
    if not parts:
        return TriMesh.empty(), TriMesh.empty()
    background = mesh.submesh(parts[0])
    best, best_count = None, 0
    for part in parts[1:]:
        count = int(np.sum(inside(mesh.vertices[np.unique(mesh.triangles[part])])))
        if count > best_count:
            best, best_count = part, count
    obj = mesh.submesh(best) if best is not None else TriMesh.empty()
    return obj, background


# PLY ------------------------------------------------------------------------

def save_ply(mesh: TriMesh, path) -> None:
    mesh.validate()
    rgb = np.clip(np.round(np.asarray(mesh.colors) * 255), 0, 255).astype(int)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(mesh.vertices, rgb)]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path) -> TriMesh:
    """Reader for the ascii layout written by :func:`save_ply`."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    counts, i = {}, 1
    while text[i].strip() != "end_header":
        parts = text[i].split()
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError(f"{path}: only ascii PLY is supported")
        if parts[0] == "element":
            counts[parts[1]] = int(parts[2])
        i += 1
    i += 1
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    vrows = np.array([text[i + k].split() for k in range(nv)], dtype=np.float64).reshape(nv, 6)
    frows = np.array([text[i + nv + k].split() for k in range(nf)], dtype=np.int64).reshape(nf, 4)
    if nf and np.any(frows[:, 0] != 3):
        raise ValueError(f"{path}: only triangle faces are supported")
    return TriMesh(vrows[:, :3], frows[:, 1:], vrows[:, 3:] / 255.0)


def mask_hull(frame, pose, intrinsics, band: float = 0.1):
    """Region carved by one frame's dynamic mask.

    A point is inside when it projects into the mask with positive depth
    and lies no more than ``band`` in front of the observed surface.
    Returns a callable mapping (N, 3) world points to a bool mask.
    """
    from .dataio import project

    inv = pose.inverse()

    def inside(points):
        cam = inv.apply(np.asarray(points, dtype=np.float64))
        uv, z = project(cam, intrinsics)
        with np.errstate(invalid="ignore"):
            u = np.round(uv[:, 0])
            v = np.round(uv[:, 1])
            ok = (z > 0) & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
        out = np.zeros(len(cam), dtype=bool)
        iu, iv = u[ok].astype(int), v[ok].astype(int)
        d = frame.depth[iv, iu]
        out[ok] = frame.mask[iv, iu] & (d > 0) & (z[ok] >= d - band)
        return out

    return inside
