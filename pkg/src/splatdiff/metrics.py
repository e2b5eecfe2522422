"""Geometry and appearance metrics for clouds, meshes, and renders."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

__all__ = ["chamfer", "p2s", "fscore", "normal_consistency", "psnr", "ssim",
           "sample_mesh_points", "MetricReport"]

PSNR_CAP_DB = 99.0


# ------------------------------------------------------------- point sets

def _points(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) == 0:
        raise ValueError(f"{name} must be a non-empty (n, 3) point set, "
                         f"got shape {x.shape}")
    return x


def chamfer(a, b) -> float:
    """Mean of the two directed mean nearest-neighbor distances, in cm."""
    a = _points(a, "a")
    b = _points(b, "b")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return 100.0 * 0.5 * (d_ab.mean() + d_ba.mean())


def fscore(a, b, threshold: float = 0.01) -> float:
    """Harmonic mean of precision/recall at a distance threshold (meters)."""
    a = _points(a, "a")
    b = _points(b, "b")
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    precision = float((cKDTree(b).query(a)[0] <= threshold).mean())
    recall = float((cKDTree(a).query(b)[0] <= threshold).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ------------------------------------------------------- point-to-surface

def _closest_on_triangles(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Closest point to p on each triangle (m,3,3) -> (m,3)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac = b - a, c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    out = np.empty_like(a)
    done = np.zeros(len(a), dtype=bool)

    def settle(mask, value):
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    settle((d1 <= 0) & (d2 <= 0), a)                       # vertex a
    settle((d3 >= 0) & (d4 <= d3), b)                      # vertex b
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
    settle((vc <= 0) & (d1 >= 0) & (d3 <= 0),
           a + np.nan_to_num(t_ab)[:, None] * ab)          # edge ab
    settle((d6 >= 0) & (d5 <= d6), c)                      # vertex c
    vb = d5 * d2 - d1 * d6
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ac = d2 / (d2 - d6)
    settle((vb <= 0) & (d2 >= 0) & (d6 <= 0),
           a + np.nan_to_num(t_ac)[:, None] * ac)          # edge ac
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
           b + np.nan_to_num(t_bc)[:, None] * (c - b))     # edge bc
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.nan_to_num(vb / denom)
        w = np.nan_to_num(vc / denom)
    settle(np.ones(len(a), dtype=bool),
           a + v[:, None] * ab + w[:, None] * ac)          # interior
    return out


class _MeshDistance:
    """Exact nearest-surface queries: KD-pruned candidate triangles, then
    closed-form point-triangle distances."""

    def __init__(self, mesh):
        if mesh.n_triangles == 0:
            raise ValueError("mesh has no triangles")
        self.tri = mesh.vertices[mesh.triangles]            # (m, 3, 3)
        self.centroids = self.tri.mean(axis=1)
        self.radii = np.linalg.norm(
            self.tri - self.centroids[:, None, :], axis=2).max(axis=1)
        self.r_max = float(self.radii.max())
        self._vtx_tree = cKDTree(mesh.vertices)
        self._cen_tree = cKDTree(self.centroids)

    def query(self, points) -> tuple[np.ndarray, np.ndarray]:
        """(distance, triangle index) per point."""
        points = _points(points, "points")
        upper = self._vtx_tree.query(points)[0]     # surface dist <= vertex dist
        dists = np.empty(len(points))
        idx = np.empty(len(points), dtype=np.int64)
        for i, (p, u) in enumerate(zip(points, upper)):
            cand = self._cen_tree.query_ball_point(p, u + self.r_max + 1e-12)
            cand = np.asarray(cand, dtype=np.int64)
            closest = _closest_on_triangles(p, self.tri[cand])
            d = np.linalg.norm(closest - p, axis=1)
            k = int(np.argmin(d))
            dists[i] = d[k]
            idx[i] = cand[k]
        return dists, idx


def p2s(points, mesh) -> float:
    """Mean exact distance from points to the mesh surface, in cm.

    Directed (points -> surface); not symmetric.
    """
    d, _ = _MeshDistance(mesh).query(points)
    return 100.0 * float(d.mean())


# ------------------------------------------------------ normal consistency

def _face_normals(mesh) -> np.ndarray:
    tri = mesh.vertices[mesh.triangles]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(norm, 1e-300)


def sample_mesh_points(mesh, n: int, seed: int = 0
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted surface samples -> (points (n,3), face indices (n,))."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if mesh.n_triangles == 0 or total <= 0:
        raise ValueError("cannot sample a mesh with no surface area")
    rng = np.random.default_rng(seed)
    faces = rng.choice(mesh.n_triangles, size=n, p=areas / total)
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.triangles[faces]]
    pts = (tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0])
           + v[:, None] * (tri[:, 2] - tri[:, 0]))
    return pts, faces


def _directed_nc(mesh_a, mesh_b, n, seed) -> float:
    pts, faces_a = sample_mesh_points(mesh_a, n, seed)
    _, faces_b = _MeshDistance(mesh_b).query(pts)
    na = _face_normals(mesh_a)[faces_a]
    nb = _face_normals(mesh_b)[faces_b]
    return float(np.abs(np.einsum("ij,ij->i", na, nb)).mean())


def normal_consistency(mesh_a, mesh_b, samples: int = 2000,
                       seed: int = 0) -> float:
    """Symmetrized mean |cos| between sample normals and nearest-surface
    normals. Orientation-agnostic by the absolute value."""
    return 0.5 * (_directed_nc(mesh_a, mesh_b, samples, seed)
                  + _directed_nc(mesh_b, mesh_a, samples, seed + 1))


# ------------------------------------------------------------------ images

def _image_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (H, W, C) images, got {a.shape}")
    for name, img in (("first", a), ("second", b)):
        if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
            raise ValueError(f"{name} image values outside [0, 1]")
    return a, b


def psnr(img_a, img_b, cap_db: float = PSNR_CAP_DB) -> float:
    """10·log10(1 / MSE) for [0,1] images, capped for identical inputs."""
    a, b = _image_pair(img_a, img_b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return cap_db
    return min(10.0 * math.log10(1.0 / mse), cap_db)


def _gaussian_kernel(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _windows(img: np.ndarray, size: int) -> np.ndarray:
    """All size×size sliding windows, shape (H', W', size, size)."""
    from numpy.lib.stride_tricks import sliding_window_view
    return sliding_window_view(img, (size, size))


def _ssim_channel(a: np.ndarray, b: np.ndarray, kernel: np.ndarray,
                  c1: float, c2: float) -> float:
    k = kernel.reshape(1, 1, *kernel.shape)
    wa = _windows(a, kernel.shape[0])
    wb = _windows(b, kernel.shape[0])
    mu_a = (wa * k).sum(axis=(2, 3))
    mu_b = (wb * k).sum(axis=(2, 3))
    var_a = (wa ** 2 * k).sum(axis=(2, 3)) - mu_a ** 2
    var_b = (wb ** 2 * k).sum(axis=(2, 3)) - mu_b ** 2
    cov = (wa * wb * k).sum(axis=(2, 3)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim(img_a, img_b, window: int = 7, sigma: float = 1.5,
         c1: float = 0.01 ** 2, c2: float = 0.03 ** 2,
         ms_weights=None) -> float:
    """Structural similarity with a Gaussian window, valid-window averaging.

    Single-scale by default; pass ms_weights (e.g. the usual 5-scale vector)
    for a multi-scale variant that downsamples by 2 between scales and
    combines per-scale scores as a weighted geometric mean.
    """
    a, b = _image_pair(img_a, img_b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if ms_weights is None:
        weights = [1.0]
    else:
        weights = [float(w) for w in np.asarray(ms_weights, dtype=np.float64)]
        if not weights or any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ValueError("ms_weights must be non-empty and non-negative")
    kernel = _gaussian_kernel(window, sigma)

    scores = []
    for level in range(len(weights)):
        if min(a.shape[0], a.shape[1]) < window:
            raise ValueError(f"image too small for {window}x{window} window "
                             f"at scale {level}")
        scores.append(np.mean([
            _ssim_channel(a[..., c], b[..., c], kernel, c1, c2)
            for c in range(a.shape[-1])]))
        if level + 1 < len(weights):
            ha, wa_ = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
            a = a[:ha, :wa_].reshape(ha // 2, 2, wa_ // 2, 2, -1).mean((1, 3))
            b = b[:ha, :wa_].reshape(ha // 2, 2, wa_ // 2, 2, -1).mean((1, 3))
    if ms_weights is None:
        return float(scores[0])
    wsum = sum(weights)
    # weighted geometric mean; scores are clamped away from zero so a single
    # pathological scale cannot produce a non-finite result
    total = sum((w / wsum) * math.log(max(s, 1e-12))
                for w, s in zip(weights, scores))
    return float(math.exp(total))


# ------------------------------------------------------------------ report

@dataclass
class MetricReport:
    cd_cm: float | None = None
    p2s_cm: float | None = None
    fscore: float | None = None
    nc: float | None = None
    psnr_db: float | None = None
    ssim: float | None = None
    per_view: list[dict] = field(default_factory=list)

    _SCALARS = ("cd_cm", "p2s_cm", "fscore", "nc", "psnr_db", "ssim")

    def __post_init__(self):
        for name in ("fscore", "nc", "ssim"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, float(np.clip(v, 0.0, 1.0)))
        for name in ("cd_cm", "p2s_cm"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")

    def to_json(self) -> str:
        return json.dumps(
            {k: getattr(self, k) for k in self._SCALARS}
            | {"per_view": self.per_view},
            indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(**{k: d.get(k) for k in cls._SCALARS},
                   per_view=d.get("per_view", []))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in self._SCALARS:
            v = getattr(self, k)
            w.writerow([k, "" if v is None else repr(float(v))])
        if self.per_view:
            keys = sorted({k for row in self.per_view for k in row})
            w.writerow([])
            w.writerow(keys)
            for row in self.per_view:
                w.writerow([row.get(k, "") for k in keys])
        return buf.getvalue()
