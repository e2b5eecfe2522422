"""Differentiable software rasterizer for Gaussian-splat clouds.

Two interchangeable kernel backends: a compiled Cython extension (fast path)
and a pure-numpy painter loop.  The compiled backend is selected at import
when available; override with SPLATDIFF_BACKEND=numpy|cython or set_backend().
Projection math and gradient chaining are shared, so the backends agree to
floating-point noise (the kernels only differ in loop scheduling).
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..splat import SplatCloud
from . import kernels_py
from .projection import (
    BLUR_PX2,
    COND_MAX,
    FOOTPRINT_SIGMA,
    T_MIN,
    Z_NEAR,
    chain_to_params,
    project_cloud,
)

__all__ = [
    "RenderedView",
    "render",
    "render_depth_median",
    "render_gradients",
    "set_backend",
    "get_backend",
    "available_backends",
]

try:
    from . import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

_BACKENDS = {"numpy": kernels_py}
if _kernels_c is not None:
    _BACKENDS["cython"] = _kernels_c


def _initial_backend() -> str:
    want = os.environ.get("SPLATDIFF_BACKEND", "auto")
    if want == "auto":
        return "cython" if "cython" in _BACKENDS else "numpy"
    if want not in _BACKENDS:
        raise ImportError(f"requested backend {want!r} unavailable; have {sorted(_BACKENDS)}")
    return want


_active = _initial_backend()


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
    _active = name


def get_backend() -> str:
    return _active


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


@dataclass
class RenderedView:
    color: np.ndarray   # (H, W, 3) in [0, 1]
    alpha: np.ndarray   # (H, W) in [0, 1]
    depth: np.ndarray   # (H, W) alpha-weighted expected depth, +inf where empty
    n_skipped: int = 0  # splats dropped for degenerate 2D covariance


def _run_forward(cloud, cam, background, blur_px2, footprint_sigma, t_min,
                 cond_max, z_near):
    bg = np.ascontiguousarray(np.asarray(background, dtype=np.float64).reshape(3))
    proj = project_cloud(cloud, cam, blur_px2=blur_px2, footprint_sigma=footprint_sigma,
                         cond_max=cond_max, z_near=z_near)
    kern = _BACKENDS[_active]
    color, alpha, depth_exp, depth_med = kern.forward(
        proj.mean2d, proj.conic, proj.depth, proj.opacity, proj.color, proj.bbox,
        cam.height, cam.width, bg, t_min, footprint_sigma ** 2)
    return proj, color, alpha, depth_exp, depth_med


def render(cloud: SplatCloud, cam, background=(1.0, 1.0, 1.0), *,
           blur_px2: float = BLUR_PX2, footprint_sigma: float = FOOTPRINT_SIGMA,
           t_min: float = T_MIN, cond_max: float = COND_MAX,
           z_near: float = Z_NEAR) -> RenderedView:
    """Rasterize a cloud: front-to-back alpha compositing over `background`."""
    proj, color, alpha, depth_exp, _ = _run_forward(
        cloud, cam, background, blur_px2, footprint_sigma, t_min, cond_max, z_near)
    return RenderedView(color=color, alpha=alpha, depth=depth_exp, n_skipped=proj.n_skipped)


def render_depth_median(cloud: SplatCloud, cam, *, blur_px2: float = BLUR_PX2,
                        footprint_sigma: float = FOOTPRINT_SIGMA, t_min: float = T_MIN,
                        cond_max: float = COND_MAX, z_near: float = Z_NEAR) -> np.ndarray:
    """Depth at which transmittance first crosses 0.5; +inf where alpha < 0.5."""
    _, _, _, _, depth_med = _run_forward(
        cloud, cam, (1.0, 1.0, 1.0), blur_px2, footprint_sigma, t_min, cond_max, z_near)
    return depth_med


def render_gradients(cloud: SplatCloud, cam, grad_color: np.ndarray,
                     background=(1.0, 1.0, 1.0), *, blur_px2: float = BLUR_PX2,
                     footprint_sigma: float = FOOTPRINT_SIGMA, t_min: float = T_MIN,
                     cond_max: float = COND_MAX, z_near: float = Z_NEAR):
    """Backpropagate an image-space cotangent through the rasterizer.

    grad_color is dL/d(rendered color), shape (H, W, 3).  Returns
    (grads, n_skipped): per-splat gradients keyed by parameter array name,
    aligned with the input cloud, plus the degenerate-skip count.
    """
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)
    if grad_color.shape != (cam.height, cam.width, 3):
        raise ValueError(f"grad_color shape {grad_color.shape} != {(cam.height, cam.width, 3)}")
    bg = np.ascontiguousarray(np.asarray(background, dtype=np.float64).reshape(3))
    proj = project_cloud(cloud, cam, blur_px2=blur_px2, footprint_sigma=footprint_sigma,
                         cond_max=cond_max, z_near=z_near)
    kern = _BACKENDS[_active]
    g_color, g_opacity, g_mean, g_conic = kern.backward(
        proj.mean2d, proj.conic, proj.depth, proj.opacity, proj.color, proj.bbox,
        cam.height, cam.width, bg, t_min, footprint_sigma ** 2, grad_color)
    grads = chain_to_params(proj, len(cloud), g_mean, g_conic, g_opacity, g_color)
    return grads, proj.n_skipped
