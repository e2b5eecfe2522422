"""Textured mesh extraction from splat clouds.

RGB-D views rendered along the meshing spiral are fused into a truncated
signed-distance volume; the zero level set is triangulated and colored from
the fused color accumulator.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates
from skimage import measure

from .camera import Camera, spiral_path
from .renderer import render, render_depth_median
from .splat import SplatCloud

_MIN_TRI_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray    # (n, 3) float64, meters
    triangles: np.ndarray   # (m, 3) int32, CCW seen from outside
    colors: np.ndarray      # (n, 3) float64 in [0, 1]

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32),
                   np.zeros((0, 3)))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        cr = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)


@dataclass
class TsdfVolume:
    """Node-centered TSDF grid: sample (i,j,k) sits at origin + (i,j,k)·voxel.

    Stores per-view sums rather than running means so that integrating two
    images commutes bitwise.
    """
    origin: np.ndarray          # (3,) meters
    voxel_size: float
    dims: tuple[int, int, int]
    truncation: float
    sdf_sum: np.ndarray = field(repr=False, default=None)
    w_sum: np.ndarray = field(repr=False, default=None)
    color_sum: np.ndarray = field(repr=False, default=None)
    _points_cache: np.ndarray | None = field(repr=False, default=None)

    @classmethod
    def create(cls, origin, voxel_size: float, dims,
               truncation: float | None = None) -> "TsdfVolume":
        origin = np.asarray(origin, dtype=np.float64).reshape(3)
        dims = tuple(int(d) for d in dims)
        if voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        if any(d < 2 for d in dims):
            raise ValueError(f"need at least 2 samples per axis, got {dims}")
        if truncation is None:
            truncation = 3.0 * voxel_size
        vol = cls(origin, float(voxel_size), dims, float(truncation))
        vol.sdf_sum = np.zeros(dims, dtype=np.float64)
        vol.w_sum = np.zeros(dims, dtype=np.float64)
        vol.color_sum = np.zeros(dims + (3,), dtype=np.float64)
        return vol

    def sdf(self) -> np.ndarray:
        """Mean signed distance; +truncation where unobserved."""
        w = self.w_sum
        out = np.full(self.dims, self.truncation, dtype=np.float64)
        obs = w > 0
        out[obs] = self.sdf_sum[obs] / w[obs]
        return out

    def observed(self) -> np.ndarray:
        return self.w_sum > 0

    def grid_points(self) -> np.ndarray:
        """World coordinates of all grid samples, shape (prod(dims), 3)."""
        if self._points_cache is None:
            axes = [self.origin[a] + self.voxel_size * np.arange(self.dims[a])
                    for a in range(3)]
            g = np.meshgrid(*axes, indexing="ij")
            self._points_cache = np.stack(
                [c.reshape(-1) for c in g], axis=1)
        return self._points_cache


def tsdf_integrate(vol: TsdfVolume, depth: np.ndarray, color: np.ndarray,
                   cam: Camera, z_near: float = 0.05) -> TsdfVolume:
    """Projective TSDF update with weight 1 per observation.

    Non-finite depths are sentinels (empty pixels) and contribute nothing.
    Samples more than one truncation band behind the surface are skipped;
    in front they clamp to +truncation.
    """
    depth = np.asarray(depth, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth {depth.shape} does not match camera "
                         f"{(cam.height, cam.width)}")
    if color.shape != (cam.height, cam.width, 3):
        raise ValueError(f"color {color.shape} does not match camera")

    pts = vol.grid_points()
    q = pts @ cam.rotation.T + cam.translation
    z = q[:, 2]
    in_front = z > z_near
    u = np.where(in_front, cam.fx * q[:, 0] / np.where(in_front, z, 1.0)
                 + cam.cx, -1.0)
    v = np.where(in_front, cam.fy * q[:, 1] / np.where(in_front, z, 1.0)
                 + cam.cy, -1.0)
    px = np.floor(u).astype(np.int64)
    py = np.floor(v).astype(np.int64)
    ok = (in_front & (px >= 0) & (px < cam.width)
          & (py >= 0) & (py < cam.height))
    px_ok, py_ok = px[ok], py[ok]
    d = depth[py_ok, px_ok]
    fin = np.isfinite(d)
    sd = d[fin] - z[ok][fin]
    keep = sd >= -vol.truncation
    obs = np.minimum(sd[keep], vol.truncation)

    lin = np.flatnonzero(ok)[fin][keep]     # unique: one sample per voxel
    vol.sdf_sum.reshape(-1)[lin] += obs
    vol.w_sum.reshape(-1)[lin] += 1.0
    vol.color_sum.reshape(-1, 3)[lin] += color[py_ok, px_ok][fin][keep]
    return vol


def _trilinear(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample a (X,Y,Z) or (X,Y,Z,C) grid at fractional index coords (n,3)."""
    cs = coords.T
    if grid.ndim == 3:
        return map_coordinates(grid, cs, order=1, mode="nearest")
    return np.stack([map_coordinates(grid[..., c], cs, order=1,
                                     mode="nearest")
                     for c in range(grid.shape[-1])], axis=1)


def marching_cubes(vol: TsdfVolume) -> TriangleMesh:
    """Triangulate the zero level set of the fused signed-distance field.

    Cells touching unobserved samples are skipped. Faces are oriented so the
    geometric normal points toward increasing signed distance (outward), and
    zero-area triangles are dropped.
    """
    obs = vol.observed()
    if not obs.any():
        return TriangleMesh.empty()
    sdf = vol.sdf()
    inside = sdf[obs]
    if inside.min() >= 0.0 or inside.max() <= 0.0:
        return TriangleMesh.empty()    # no crossing among observed samples

    try:
        verts, faces, _, _ = measure.marching_cubes(
            sdf, level=0.0, spacing=(vol.voxel_size,) * 3,
            gradient_direction="ascent")
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    if len(faces) == 0:
        return TriangleMesh.empty()
    faces = faces.astype(np.int32)

    idx_coords = verts / vol.voxel_size          # back to index units

    # keep only triangles from cells whose 8 corners are all observed: the
    # unobserved fill (+truncation) creates phantom crossings at the
    # observation boundary and those cells must not contribute surface
    valid = obs[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                if (dx, dy, dz) != (0, 0, 0):
                    valid &= obs[dx:dx + valid.shape[0],
                                 dy:dy + valid.shape[1],
                                 dz:dz + valid.shape[2]]
    cent = idx_coords[faces].mean(axis=1)
    hi_cell = np.array(valid.shape) - 1
    keep = np.ones(len(faces), dtype=bool)
    # a centroid sitting numerically on a cell boundary must have every
    # straddled cell valid
    lo = np.clip(np.floor(cent - 1e-9).astype(np.int64), 0, hi_cell)
    hi = np.clip(np.floor(cent + 1e-9).astype(np.int64), 0, hi_cell)
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                ix = hi[:, 0] if cx else lo[:, 0]
                iy = hi[:, 1] if cy else lo[:, 1]
                iz = hi[:, 2] if cz else lo[:, 2]
                keep &= valid[ix, iy, iz]
    faces = faces[keep]
    if len(faces) == 0:
        return TriangleMesh.empty()

    # vertex colors: weight-aware trilinear ratio of the accumulators
    cw = _trilinear(vol.w_sum, idx_coords)
    csum = _trilinear(vol.color_sum, idx_coords)
    colors = np.where(cw[:, None] > 1e-12,
                      csum / np.maximum(cw[:, None], 1e-12), 0.5)
    colors = np.clip(colors, 0.0, 1.0)

    # deterministic orientation: align each face normal with the trilinear
    # SDF gradient at its centroid
    grads = np.gradient(sdf, vol.voxel_size)
    centroids = cent[keep]
    g = np.stack([_trilinear(gc, centroids) for gc in grads], axis=1)
    tri = verts[faces]
    n_geom = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n_geom, g) < 0.0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    area = 0.5 * np.linalg.norm(n_geom, axis=1)
    faces = faces[area > _MIN_TRI_AREA]

    # drop vertices no surviving face references
    used = np.zeros(len(verts), dtype=bool)
    used[faces.reshape(-1)] = True
    remap = np.cumsum(used) - 1
    mesh = TriangleMesh(
        vertices=vol.origin + verts[used],
        triangles=remap[faces].astype(np.int32),
        colors=colors[used])
    return mesh


def extract_textured_mesh(cloud: SplatCloud, n_views: int = 36,
                          voxel_size: float = 0.01,
                          truncation: float | None = None,
                          background=(1.0, 1.0, 1.0),
                          radius: float = 2.0,
                          size: int = 64) -> TriangleMesh:
    """Render RGB + median depth along the meshing spiral, fuse, triangulate."""
    if len(cloud) == 0:
        return TriangleMesh.empty()
    if truncation is None:
        truncation = 3.0 * voxel_size

    margin = truncation + 3.0 * float(cloud.scales.max()) + 2.0 * voxel_size
    lo = cloud.positions.min(axis=0) - margin
    hi = cloud.positions.max(axis=0) + margin
    dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
    vol = TsdfVolume.create(lo, voxel_size, dims, truncation)

    for cam in spiral_path(n_views, "meshing", radius=radius, size=size):
        view = render(cloud, cam, background=background)
        depth = render_depth_median(cloud, cam)
        tsdf_integrate(vol, depth, view.color, cam)
    return marching_cubes(vol)


def save_mesh_ply(mesh: TriangleMesh, path) -> None:
    """Binary little-endian PLY with per-vertex uchar color."""
    v = np.ascontiguousarray(mesh.vertices, dtype=np.float32)
    c = np.clip(np.rint(np.asarray(mesh.colors) * 255.0), 0, 255
                ).astype(np.uint8)
    t = np.ascontiguousarray(mesh.triangles, dtype=np.int32)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(v)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {len(t)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for i in range(len(v)):
            f.write(struct.pack("<fff", *v[i]))
            f.write(struct.pack("<BBB", *c[i]))
        for i in range(len(t)):
            f.write(struct.pack("<Biii", 3, *t[i]))


def load_mesh_ply(path) -> TriangleMesh:
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise ValueError(f"not a PLY file: {path}")
        n_vert = n_face = 0
        while True:
            line = f.readline()
            if not line:
                raise ValueError("unterminated PLY header")
            parts = line.strip().split()
            if parts[:2] == [b"element", b"vertex"]:
                n_vert = int(parts[2])
            elif parts[:2] == [b"element", b"face"]:
                n_face = int(parts[2])
            elif parts[:1] == [b"end_header"]:
                break
        verts = np.empty((n_vert, 3))
        cols = np.empty((n_vert, 3))
        for i in range(n_vert):
            x, y, z = struct.unpack("<fff", f.read(12))
            r, g, b = struct.unpack("<BBB", f.read(3))
            verts[i] = (x, y, z)
            cols[i] = (r / 255.0, g / 255.0, b / 255.0)
        tris = np.empty((n_face, 3), dtype=np.int32)
        for i in range(n_face):
            (cnt,) = struct.unpack("<B", f.read(1))
            if cnt != 3:
                raise ValueError(f"non-triangle face with {cnt} vertices")
            tris[i] = struct.unpack("<iii", f.read(12))
    return TriangleMesh(verts, tris, cols)
