"""Desk-scale 3D-consistent diffusion sampling over Gaussian-splat scenes.

Modules:
    schedule       noise schedule + closed-form diffusion transitions
    camera         pinhole cameras, view rigs, spiral paths, ray embeddings
    splat          Gaussian-splat data model, regularizer, PLY serialization
    renderer       differentiable software splat rasterizer (compiled + numpy)
    denoiser       oracle and analytic stand-ins for a 2D multi-view denoiser
    reconstructor  optimization-based splat fitting to denoised views
    sampler        baseline and trajectory-refined reverse sampling
    meshing        TSDF fusion + marching cubes mesh extraction
    metrics        geometry and appearance evaluation metrics
    cli            experiment runner
"""

__version__ = "0.1.0"
