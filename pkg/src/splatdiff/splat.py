"""Gaussian-splat scene state: data model, validation, regularization, PLY IO.

A cloud is stored struct-of-arrays (float64) for the renderer's benefit;
`cloud[i]` gives a per-splat named-tuple view.  Arrays are treated as
immutable after construction — optimizers build new clouds.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

__all__ = [
    "Gaussian",
    "SplatCloud",
    "FormatError",
    "validate",
    "quat_to_rot",
    "quat_to_rot_jacobian",
    "regularizer",
    "save_ply",
    "load_ply",
]

# DC spherical-harmonic basis constant; colors are stored in PLY files as
# f_dc = (color - 0.5) / SH_C0 to match the common splat vertex layout.
SH_C0 = 0.28209479177387814


class Gaussian(NamedTuple):
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    opacity: float
    color: np.ndarray


@dataclass
class SplatCloud:
    positions: np.ndarray  # (n, 3) meters
    scales: np.ndarray     # (n, 3) per-axis stddev, meters, > 0
    rotations: np.ndarray  # (n, 4) quaternions (w, x, y, z)
    opacities: np.ndarray  # (n,) in [0, 1]
    colors: np.ndarray     # (n, 3) in [0, 1]
    scene_scale: float = 1.0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64)).reshape(-1, 3)
        self.scales = np.atleast_2d(np.asarray(self.scales, dtype=np.float64)).reshape(-1, 3)
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64)).reshape(-1, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        self.colors = np.atleast_2d(np.asarray(self.colors, dtype=np.float64)).reshape(-1, 3)
        n = len(self.positions)
        for name in ("scales", "rotations", "opacities", "colors"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    @classmethod
    def empty(cls, scene_scale: float = 1.0) -> "SplatCloud":
        z = np.zeros((0, 3))
        return cls(z, z.copy(), np.zeros((0, 4)), np.zeros(0), z.copy(), scene_scale)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.scales[i], self.rotations[i],
                        float(self.opacities[i]), self.colors[i])

    def copy(self) -> "SplatCloud":
        return SplatCloud(self.positions.copy(), self.scales.copy(), self.rotations.copy(),
                          self.opacities.copy(), self.colors.copy(), self.scene_scale)


class FormatError(ValueError):
    """Raised for malformed or truncated serialized clouds."""


def validate(cloud: SplatCloud) -> list[str]:
    """Invariant check; returns human-readable violations (empty = valid)."""
    problems = []
    n = len(cloud)
    if not np.all(np.isfinite(cloud.positions)):
        problems.append("non-finite position entries")
    if np.any(cloud.scales <= 0) or not np.all(np.isfinite(cloud.scales)):
        bad = np.where(np.any((cloud.scales <= 0) | ~np.isfinite(cloud.scales), axis=1))[0]
        problems.append(f"non-positive or non-finite scales at indices {bad[:8].tolist()}")
    norms = np.linalg.norm(cloud.rotations, axis=1) if n else np.zeros(0)
    bad_q = np.where(np.abs(norms - 1.0) > 1e-9)[0]
    if len(bad_q):
        problems.append(f"quaternion norm != 1 (>1e-9) at indices {bad_q[:8].tolist()}")
    if np.any((cloud.opacities < 0) | (cloud.opacities > 1)) or not np.all(np.isfinite(cloud.opacities)):
        problems.append("opacity outside [0, 1]")
    if np.any((cloud.colors < 0) | (cloud.colors > 1)) or not np.all(np.isfinite(cloud.colors)):
        problems.append("color outside [0, 1]")
    return problems


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions (w, x, y, z); vectorized (n,4)->(n,3,3)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rot_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions; (n,4) -> (n,4,3,3) with axis 1 = (w,x,y,z)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = len(q)
    J = np.zeros((n, 4, 3, 3))
    zero = np.zeros(n)
    J[:, 0] = 2 * np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1).reshape(n, 3, 3)
    J[:, 1] = 2 * np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1).reshape(n, 3, 3)
    J[:, 2] = 2 * np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1).reshape(n, 3, 3)
    J[:, 3] = 2 * np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1).reshape(n, 3, 3)
    return J


def regularizer(cloud: SplatCloud, w_op: float = 1.0, w_aniso: float = 1.0,
                kappa: float = 10.0):
    """Geometry regularizer: opacity binary entropy + anisotropy hinge.

        L = w_op * sum_i H(o_i) + w_aniso * sum_i max(0, max(s_i)/min(s_i) - kappa)

    Pushes opacities toward {0, 1} and keeps splats from degenerating into
    needles.  Returns (loss, {"opacity": (n,), "scale": (n,3)}) with analytic
    gradients; the entropy gradient is evaluated on opacities clamped away
    from the endpoints so it stays finite at saturation.
    """
    n = len(cloud)
    if n == 0:
        return 0.0, {"opacity": np.zeros(0), "scale": np.zeros((0, 3))}
    o = np.clip(cloud.opacities, 1e-12, 1.0 - 1e-12)
    H = -(o * np.log(o) + (1.0 - o) * np.log1p(-o))
    g_o = w_op * np.log((1.0 - o) / o)  # dH/do

    s = cloud.scales
    imax = np.argmax(s, axis=1)
    imin = np.argmin(s, axis=1)
    smax = s[np.arange(n), imax]
    smin = s[np.arange(n), imin]
    ratio = smax / smin
    hinge = np.maximum(0.0, ratio - kappa)
    g_s = np.zeros_like(s)
    active = ratio > kappa
    if np.any(active):
        idx = np.where(active)[0]
        g_s[idx, imax[idx]] += w_aniso / smin[idx]
        g_s[idx, imin[idx]] += -w_aniso * smax[idx] / smin[idx] ** 2
    loss = w_op * float(np.sum(H)) + w_aniso * float(np.sum(hinge))
    return loss, {"opacity": g_o, "scale": g_s}


_PLY_PROPS = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
              "f_dc_0", "f_dc_1", "f_dc_2"]


def save_ply(cloud: SplatCloud) -> bytes:
    """Binary little-endian PLY in the common splat vertex layout."""
    n = len(cloud)
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0",
         f"comment scene_scale {cloud.scene_scale:.17g}",
         f"element vertex {n}"]
        + [f"property float {p}" for p in _PLY_PROPS]
        + ["end_header", ""])
    rec = np.empty((n, len(_PLY_PROPS)), dtype="<f4")
    rec[:, 0:3] = cloud.positions
    rec[:, 3:6] = cloud.scales
    rec[:, 6:10] = cloud.rotations
    rec[:, 10] = cloud.opacities
    rec[:, 11:14] = (cloud.colors - 0.5) / SH_C0
    return header.encode("ascii") + rec.tobytes()


def load_ply(data: bytes) -> SplatCloud:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file (missing header)")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    payload = data[end + len(b"end_header\n"):]

    if len(header) < 2 or header[1].strip() != "format binary_little_endian 1.0":
        raise FormatError("unsupported PLY format (need binary_little_endian 1.0)")
    n = None
    props = []
    scene_scale = 1.0
    in_vertex = False
    for line in header[2:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "comment" and len(parts) == 3 and parts[1] == "scene_scale":
            scene_scale = float(parts[2])
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] != "float":
                raise FormatError(f"unsupported property type {parts[1]!r}")
            props.append(parts[2])
    if n is None:
        raise FormatError("missing vertex element")
    missing = [p for p in _PLY_PROPS if p not in props]
    if missing:
        raise FormatError(f"missing vertex properties: {missing}")

    width = len(props)
    need = n * width * 4
    if len(payload) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(payload)}")
    rec = np.frombuffer(payload[:need], dtype="<f4").reshape(n, width).astype(np.float64)
    col = {p: rec[:, i] for i, p in enumerate(props)}
    colors = np.stack([col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]], axis=1) * SH_C0 + 0.5
    rotations = np.stack([col[f"rot_{i}"] for i in range(4)], axis=1)
    # float32 storage perturbs the unit norm by ~1e-8; restore it exactly
    norms = np.linalg.norm(rotations, axis=1, keepdims=True)
    rotations = np.divide(rotations, norms, out=rotations, where=norms > 0)
    return SplatCloud(
        positions=np.stack([col["x"], col["y"], col["z"]], axis=1),
        scales=np.stack([col["scale_0"], col["scale_1"], col["scale_2"]], axis=1),
        rotations=rotations,
        opacities=col["opacity"].copy(),
        colors=np.clip(colors, 0.0, 1.0),
        scene_scale=scene_scale,
    )
