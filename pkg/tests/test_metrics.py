import math

import numpy as np
import pytest
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from splatdiff.meshing import TriangleMesh, TsdfVolume, marching_cubes
from splatdiff.metrics import (MetricReport, chamfer, fscore,
                               normal_consistency, p2s, psnr,
                               sample_mesh_points, ssim)


def _sphere_mesh(n=41, voxel=0.033, radius=0.5):
    vol = TsdfVolume.create(origin=(-voxel * (n - 1) / 2,) * 3,
                            voxel_size=voxel, dims=(n, n, n))
    sdf = np.linalg.norm(vol.grid_points(), axis=1) - radius
    vol.sdf_sum[:] = np.clip(sdf, -vol.truncation, vol.truncation
                             ).reshape(vol.dims)
    vol.w_sum[:] = 1.0
    return marching_cubes(vol)


def _plane_mesh(z=0.0, flip=False):
    v = np.array([[-1, -1, z], [1, -1, z], [1, 1, z], [-1, 1, z]], dtype=float)
    t = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    if flip:
        t = t[:, [0, 2, 1]]
    return TriangleMesh(v, t, np.full((4, 3), 0.5))


# ----------------------------------------------------------------- chamfer

def test_chamfer_identity_and_hand_case():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    assert chamfer(pts, pts.copy()) == 0.0
    assert chamfer([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]]) == pytest.approx(100.0)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(100, 3))
    b = rng.normal(size=(100, 3)) + 0.3
    # O(n^2) oracle
    d2 = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    want = 100.0 * 0.5 * (d2.min(axis=1).mean() + d2.min(axis=0).mean())
    assert chamfer(a, b) == pytest.approx(want, abs=1e-10)
    # accelerated NN assignment identical to brute force
    tree_idx = cKDTree(b).query(a)[1]
    assert np.array_equal(tree_idx, d2.argmin(axis=1))


def test_chamfer_symmetric_and_validates():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(40, 3))
    b = rng.normal(size=(60, 3))
    assert chamfer(a, b) == chamfer(b, a)
    with pytest.raises(ValueError, match="non-empty"):
        chamfer(np.zeros((0, 3)), b)
    with pytest.raises(ValueError, match="non-empty"):
        chamfer(a, np.zeros((3, 2)))


# ------------------------------------------------------------------ fscore

def test_fscore_cases():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(30, 3))
    assert fscore(a, a.copy()) == 1.0
    assert fscore(a, a + 5.0) == 0.0
    # precision 1, recall 0.5 -> 2/3
    far = a + 100.0
    b = np.concatenate([a, far])
    assert fscore(a, b) == pytest.approx(2.0 / 3.0)
    assert fscore(a, b) == fscore(b, a)
    with pytest.raises(ValueError, match="threshold"):
        fscore(a, a, threshold=0.0)


# --------------------------------------------------------------------- p2s

def test_p2s_points_on_surface():
    mesh = _sphere_mesh()
    pts, _ = sample_mesh_points(mesh, 200, seed=4)
    assert p2s(pts, mesh) < 1e-7          # cm; 1e-9 m


def test_p2s_height_above_triangle():
    mesh = TriangleMesh(
        vertices=np.array([[-10, -10, 0], [10, -10, 0], [0, 10, 0]],
                          dtype=float),
        triangles=np.array([[0, 1, 2]], dtype=np.int32),
        colors=np.full((3, 3), 0.5))
    assert p2s([[0.0, 0.0, 0.37]], mesh) == pytest.approx(37.0, abs=1e-12)
    with pytest.raises(ValueError, match="triangles"):
        p2s([[0.0, 0.0, 0.0]], TriangleMesh.empty())


def test_p2s_matches_supersampling_oracle():
    mesh = _sphere_mesh(n=21, voxel=0.066)
    rng = np.random.default_rng(5)
    dirs = rng.normal(size=(60, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.where(rng.uniform(size=60) < 0.5,
                     rng.uniform(0.25, 0.40, size=60),
                     rng.uniform(0.60, 0.75, size=60))
    pts = dirs * radii[:, None]

    # dense barycentric supersampling of every triangle
    k = 15
    u, v = np.meshgrid(np.linspace(0, 1, k), np.linspace(0, 1, k))
    keep = (u + v) <= 1.0
    u, v = u[keep], v[keep]
    tri = mesh.vertices[mesh.triangles]
    samples = (tri[:, None, 0]
               + u[None, :, None] * (tri[:, None, 1] - tri[:, None, 0])
               + v[None, :, None] * (tri[:, None, 2] - tri[:, None, 0])
               ).reshape(-1, 3)
    oracle = 100.0 * cKDTree(samples).query(pts)[0].mean()
    got = p2s(pts, mesh)
    assert got == pytest.approx(oracle, rel=0.02)
    assert got <= oracle + 1e-12          # exact distance can only be smaller


# ------------------------------------------------------- normal consistency

def test_nc_self_and_flipped_plane():
    mesh = _sphere_mesh()
    assert normal_consistency(mesh, mesh, samples=400) == pytest.approx(1.0)
    plane = _plane_mesh()
    flipped = _plane_mesh(flip=True)
    assert normal_consistency(plane, flipped, samples=100) == pytest.approx(1.0)


def test_nc_sphere_against_coarser_sphere():
    fine = _sphere_mesh(n=41, voxel=0.033)
    coarse = _sphere_mesh(n=21, voxel=0.066)
    nc = normal_consistency(fine, coarse, samples=1500)
    print(f"NC fine-vs-coarse sphere: {nc:.4f}")
    assert nc > 0.95

    # analytic oracle: face normals of the fine sphere mesh are radial
    pts, faces = sample_mesh_points(fine, 1000, seed=6)
    tri = fine.vertices[fine.triangles[faces]]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    radial = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    agree = np.abs(np.einsum("ij,ij->i", n, radial)).mean()
    assert agree > 0.98


def test_nc_rejects_degenerate_mesh():
    degenerate = TriangleMesh(
        vertices=np.zeros((3, 3)),
        triangles=np.array([[0, 1, 2]], dtype=np.int32),
        colors=np.zeros((3, 3)))
    with pytest.raises(ValueError, match="area"):
        normal_consistency(degenerate, degenerate)


# ------------------------------------------------------------------ images

def test_psnr_cases():
    img = np.random.default_rng(7).uniform(size=(16, 16, 3))
    assert psnr(img, img.copy()) == 99.0
    a = np.full((8, 8), 0.2)
    b = np.full((8, 8), 0.3)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(ValueError, match="shapes"):
        psnr(np.zeros((4, 4)), np.zeros((5, 4)))
    with pytest.raises(ValueError, match="outside"):
        psnr(np.full((4, 4), 1.5), np.full((4, 4), 0.5))


def _naive_ssim_gray(a, b, win=7, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    r = np.arange(win) - (win - 1) / 2.0
    k1 = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(k1, k1)
    k /= k.sum()
    H, W = a.shape
    vals = []
    for i in range(H - win + 1):
        for j in range(W - win + 1):
            wa = a[i:i + win, j:j + win]
            wb = b[i:i + win, j:j + win]
            mu_a = (wa * k).sum()
            mu_b = (wb * k).sum()
            va = (wa ** 2 * k).sum() - mu_a ** 2
            vb = (wb ** 2 * k).sum() - mu_b ** 2
            cov = (wa * wb * k).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_identity_and_oracle():
    rng = np.random.default_rng(8)
    a = rng.uniform(size=(24, 24))
    b = np.clip(a + rng.normal(scale=0.08, size=a.shape), 0, 1)
    assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(_naive_ssim_gray(a, b), abs=1e-6)
    # color path averages channels
    a3 = np.stack([a] * 3, axis=-1)
    b3 = np.stack([b] * 3, axis=-1)
    assert ssim(a3, b3) == pytest.approx(ssim(a, b), abs=1e-12)
    with pytest.raises(ValueError, match="small"):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))


def test_ssim_multiscale_config():
    rng = np.random.default_rng(9)
    a = rng.uniform(size=(40, 40))
    b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1)
    single = ssim(a, b)
    assert ssim(a, b, ms_weights=[1.0]) == pytest.approx(single, abs=1e-12)
    ms = ssim(a, b, ms_weights=[0.4, 0.4, 0.2])
    assert 0.0 < ms <= 1.0
    with pytest.raises(ValueError, match="ms_weights"):
        ssim(a, b, ms_weights=[])


# -------------------------------------------------------------- invariance

def test_rigid_invariance():
    rng = np.random.default_rng(10)
    R = Rotation.random(random_state=11).as_matrix()
    t = np.array([0.7, -1.2, 0.4])

    a = rng.normal(size=(80, 3))
    b = rng.normal(size=(80, 3)) + 0.2
    assert chamfer(a @ R.T + t, b @ R.T + t) == pytest.approx(
        chamfer(a, b), abs=1e-6)
    assert fscore(a @ R.T + t, b @ R.T + t, threshold=1.0) == pytest.approx(
        fscore(a, b, threshold=1.0), abs=1e-12)

    mesh = _sphere_mesh(n=21, voxel=0.066)
    moved = TriangleMesh(mesh.vertices @ R.T + t, mesh.triangles.copy(),
                         mesh.colors.copy())
    pts = rng.normal(size=(40, 3)) * 0.3
    assert p2s(pts @ R.T + t, moved) == pytest.approx(p2s(pts, mesh), abs=1e-6)
    coarse = _sphere_mesh(n=15, voxel=0.1)
    coarse_moved = TriangleMesh(coarse.vertices @ R.T + t,
                                coarse.triangles.copy(), coarse.colors.copy())
    assert normal_consistency(moved, coarse_moved, samples=500) == \
        pytest.approx(normal_consistency(mesh, coarse, samples=500), abs=1e-6)


# ------------------------------------------------------------------ report

def test_metric_report_serialization():
    rep = MetricReport(cd_cm=1.5, p2s_cm=0.8, fscore=0.7, nc=0.93,
                       psnr_db=28.4, ssim=1.2,      # ssim clamps to 1.0
                       per_view=[{"view": 0, "psnr_db": 28.0},
                                 {"view": 1, "psnr_db": 28.8}])
    assert rep.ssim == 1.0
    back = MetricReport.from_json(rep.to_json())
    assert back == rep
    text = rep.to_csv()
    assert "cd_cm" in text and "28.8" in text
    with pytest.raises(ValueError, match="cd_cm"):
        MetricReport(cd_cm=-1.0)
