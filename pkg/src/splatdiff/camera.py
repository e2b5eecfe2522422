"""Pinhole cameras, orbit/spiral view rigs, and per-pixel ray embeddings.

World frame is y-up with the scene centered at the origin; azimuth rotates
about +y, elevation lifts toward +y.  Cameras follow the row-vector-free
OpenCV convention: +z looks forward, +x right, +y down, world-to-camera
transform x_cam = R @ x_world + t.  Pixel (row r, col c) has its center at
(u, v) = (c + 0.5, r + 0.5).
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Camera",
    "RayEmbedding",
    "look_at",
    "orbit_camera",
    "orthogonal_target_rig",
    "spiral_path",
    "evaluation_rig",
    "plucker_embedding",
    "zero_context_embedding",
    "cameras_to_text",
    "cameras_from_text",
]


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3,3) world-to-camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        R = self.rotation
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def project(self, pts_world: np.ndarray):
        """Project world points; returns ((n,2) pixel coords, (n,) cam-space depth)."""
        pc = self.world_to_cam(np.atleast_2d(pts_world))
        z = pc[:, 2]
        u = self.fx * pc[:, 0] / z + self.cx
        v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def unproject(self, pix: np.ndarray, depth) -> np.ndarray:
        """Lift pixel coords (u, v) at cam-space depth z back to world points."""
        pix = np.atleast_2d(np.asarray(pix, dtype=np.float64))
        z = np.broadcast_to(np.asarray(depth, dtype=np.float64), pix.shape[0])
        x = (pix[:, 0] - self.cx) / self.fx * z
        y = (pix[:, 1] - self.cy) / self.fy * z
        pc = np.stack([x, y, z], axis=1)
        return (pc - self.translation) @ self.rotation


@dataclass(frozen=True)
class RayEmbedding:
    """Per-pixel 6-vector {o x d, d}; all-zero when the pose is unknown."""

    data: np.ndarray  # (H, W, 6)
    is_context: bool = False


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), *, fx=None, fy=None,
            size: int = 64, focal: float | None = None) -> Camera:
    """Camera at `eye` with the optical axis through `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        # looking straight along the up axis; fall back to a fixed lateral axis
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    if focal is None:
        focal = 1.2 * size
    f_x = fx if fx is not None else focal
    f_y = fy if fy is not None else focal
    return Camera(fx=f_x, fy=f_y, cx=size / 2.0, cy=size / 2.0,
                  width=size, height=size, rotation=R, translation=t)


def orbit_camera(azimuth: float, elevation: float, radius: float = 2.0,
                 size: int = 64, focal: float | None = None) -> Camera:
    eye = radius * np.array([
        math.sin(azimuth) * math.cos(elevation),
        math.sin(elevation),
        math.cos(azimuth) * math.cos(elevation),
    ])
    return look_at(eye, size=size, focal=focal)


def orthogonal_target_rig(radius: float = 2.0, focal: float | None = None,
                          size: int = 64) -> list[Camera]:
    """Four cameras at azimuths {0, pi/2, pi, 3pi/2}, elevation 0, looking at the origin."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    return [orbit_camera(k * math.pi / 2.0, 0.0, radius, size, focal) for k in range(4)]


def spiral_path(n: int, mode: str, radius: float = 2.0, size: int = 64,
                focal: float | None = None) -> list[Camera]:
    """Orbit spiral used for free-viewpoint rendering (training) and for the
    RGB-D capture pass that feeds volumetric fusion (meshing).

    training: elevation_i = -pi/4 + (7/8) pi i/n,  azimuth_i = 5 pi i/n
    meshing:  elevation_i = -pi/4 + (1/4) pi i/n,  azimuth_i = 3 pi i/n
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if mode == "training":
        elev = lambda i: -math.pi / 4.0 + (7.0 / 8.0) * math.pi * i / n
        azim = lambda i: 5.0 * math.pi * i / n
    elif mode == "meshing":
        elev = lambda i: -math.pi / 4.0 + (math.pi / 4.0) * i / n
        azim = lambda i: 3.0 * math.pi * i / n
    else:
        raise ValueError(f"unknown spiral mode {mode!r}; expected 'training' or 'meshing'")
    return [orbit_camera(azim(i), elev(i), radius, size, focal) for i in range(n)]


def evaluation_rig(n: int = 32, radius: float = 2.0, size: int = 64,
                   focal: float | None = None) -> list[Camera]:
    """n cameras with uniform azimuth over [0, 2pi) at zero elevation."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [orbit_camera(2.0 * math.pi * i / n, 0.0, radius, size, focal) for i in range(n)]


def _pixel_grid(cam: Camera):
    u = (np.arange(cam.width, dtype=np.float64) + 0.5)[None, :]
    v = (np.arange(cam.height, dtype=np.float64) + 0.5)[:, None]
    return np.broadcast_to(u, (cam.height, cam.width)), np.broadcast_to(v, (cam.height, cam.width))


def plucker_embedding(cam: Camera) -> RayEmbedding:
    """Per-pixel ray encoding {o x d, d} with d the unit world-space direction
    through the pixel center and o the camera center."""
    u, v = _pixel_grid(cam)
    x = (u - cam.cx) / cam.fx
    y = (v - cam.cy) / cam.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d = d_cam @ cam.rotation  # R^T applied to each row vector
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    o = cam.position
    moment = np.cross(np.broadcast_to(o, d.shape), d)
    return RayEmbedding(data=np.concatenate([moment, d], axis=-1), is_context=False)


def zero_context_embedding(size: int) -> RayEmbedding:
    """Unknown-pose marker: the all-zero embedding."""
    return RayEmbedding(data=np.zeros((size, size, 6)), is_context=True)


def cameras_to_text(cams: list[Camera]) -> str:
    """One camera per row: fx fy cx cy w h, 9 rotation entries, 3 translation entries."""
    rows = []
    for c in cams:
        vals = [c.fx, c.fy, c.cx, c.cy, float(c.width), float(c.height)]
        vals += list(c.rotation.reshape(-1))
        vals += list(c.translation)
        rows.append(" ".join(f"{v:.17g}" for v in vals))
    return "\n".join(rows) + "\n"


def cameras_from_text(text: str) -> list[Camera]:
    cams = []
    for line in io.StringIO(text):
        line = line.strip()
        if not line:
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 18:
            raise ValueError(f"camera row needs 18 values, got {len(vals)}")
        cams.append(Camera(fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                           width=int(vals[4]), height=int(vals[5]),
                           rotation=np.array(vals[6:15]).reshape(3, 3),
                           translation=np.array(vals[15:18])))
    return cams
