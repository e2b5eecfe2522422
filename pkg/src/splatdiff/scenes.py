"""Synthetic splat scenes used by experiments and tests."""
from __future__ import annotations

import numpy as np

from .splat import SplatCloud

__all__ = ["fibonacci_sphere", "make_sphere_cloud", "make_blob_cloud", "make_scene"]


def fibonacci_sphere(n: int) -> np.ndarray:
    """n roughly-equidistant unit directions."""
    i = np.arange(n, dtype=np.float64)
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(1.0 - y * y)
    theta = 2.0 * np.pi * i / phi
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)


def _smooth_colors(positions: np.ndarray, extent: float) -> np.ndarray:
    """Smooth position-dependent coloring so views carry geometry information."""
    p = positions / max(extent, 1e-9)
    c = 0.5 + 0.35 * np.stack([
        np.sin(2.1 * p[:, 0] + 0.3),
        np.sin(2.7 * p[:, 1] + 1.1),
        np.sin(3.3 * p[:, 2] + 2.0),
    ], axis=1)
    return np.clip(c, 0.0, 1.0)


def _quat_align_z(normals: np.ndarray) -> np.ndarray:
    """Unit quaternions (w, x, y, z) rotating +z onto each given direction."""
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    w = 1.0 + n[:, 2]
    q = np.concatenate([w[:, None],
                        np.stack([-n[:, 1], n[:, 0], np.zeros(len(n))], axis=1)],
                       axis=1)
    # antipodal case (+z -> -z): any 180-degree flip about an axis in the plane
    bad = w < 1e-12
    q[bad] = (0.0, 1.0, 0.0, 0.0)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_sphere_cloud(n: int = 200, radius: float = 0.5, scale: float = 0.06,
                      thickness: float = 0.006, opacity: float = 1.0,
                      seed: int = 0) -> SplatCloud:
    """Opaque shell of surfels on a sphere — the meshing test scene.

    Each splat is a flat disk tangent to the sphere (thin axis radial), so the
    shell reads as a surface from any direction instead of a fuzzy band.
    """
    if n < 1:
        raise ValueError("empty scene requested (n_splats < 1)")
    dirs = fibonacci_sphere(n)
    pos = radius * dirs
    return SplatCloud(
        positions=pos,
        scales=np.tile([scale, scale, thickness], (n, 1)),
        rotations=_quat_align_z(dirs),
        opacities=np.full(n, opacity),
        colors=_smooth_colors(pos, radius),
        scene_scale=radius * 2.0,
    )


def make_blob_cloud(n: int = 32, extent: float = 0.45, seed: int = 0) -> SplatCloud:
    """Random anisotropic blobs inside a ball — the generic test subject."""
    if n < 1:
        raise ValueError("empty scene requested (n_splats < 1)")
    rng = np.random.default_rng(seed)
    # rejection-free ball sampling: direction * radius^(1/3)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pos = d * extent * rng.uniform(0, 1, size=(n, 1)) ** (1 / 3)
    base = rng.uniform(0.05, 0.12, size=(n, 1))
    scales = base * rng.uniform(1.0, 3.0, size=(n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    colors = np.clip(_smooth_colors(pos, extent) + rng.uniform(-0.1, 0.1, size=(n, 3)), 0.0, 1.0)
    return SplatCloud(
        positions=pos,
        scales=scales,
        rotations=q,
        opacities=rng.uniform(0.6, 1.0, size=n),
        colors=colors,
        scene_scale=extent * 2.0,
    )


def make_scene(shape: str, n_splats: int, seed: int) -> SplatCloud:
    if shape == "sphere":
        return make_sphere_cloud(n=n_splats, seed=seed)
    if shape == "blobs":
        return make_blob_cloud(n=n_splats, seed=seed)
    raise ValueError(f"unknown scene shape {shape!r}; expected 'sphere' or 'blobs'")
