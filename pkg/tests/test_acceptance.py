"""Acceptance suite: one test per release criterion, one verdict line each.

Self-contained on purpose — oracles are re-derived here rather than imported
from the unit-test modules, so a regression in a shared helper cannot silently
weaken these checks.
"""
import json
import time
from pathlib import Path

import numpy as np

from splatdiff.camera import orbit_camera, orthogonal_target_rig
from splatdiff.cli import main as cli_main
from splatdiff.denoiser import GaussianMixture, OracleDenoiserConfig, gm_predict_x0
from splatdiff.meshing import TsdfVolume, extract_textured_mesh, marching_cubes
from splatdiff.metrics import chamfer, fscore, normal_consistency, psnr, ssim
from splatdiff.reconstructor import FitConfig
from splatdiff.renderer import render, render_gradients
from splatdiff.renderer.projection import FOOTPRINT_SIGMA, T_MIN, Z_NEAR
from splatdiff.sampler import (consistency_residual, make_oracle_denoiser,
                               sample_3d_consistent, sample_baseline)
from splatdiff.scenes import make_blob_cloud, make_sphere_cloud
from splatdiff.schedule import (ddpm_step, forward_diffuse, make_linear_schedule,
                                one_step_x0, posterior_mean)
from splatdiff.splat import SplatCloud, quat_to_rot, regularizer

BG = (1.0, 1.0, 1.0)


def _verdict(n: int, ok: bool, detail: str) -> None:
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {n}: {detail}"


# ------------------------------------------------------------ 1: scheduler

def test_criterion_1_scheduler_exactness():
    t0 = time.perf_counter()
    sched = make_linear_schedule(1000)
    rng = np.random.default_rng(0)
    worst_rt = worst_pm = 0.0
    for _ in range(1000):
        x0 = rng.normal(size=4)
        eps = rng.normal(size=4)
        t = int(rng.integers(1, sched.T + 1))
        xt = forward_diffuse(x0, eps, t, sched)
        back = one_step_x0(xt, eps, t, sched)
        worst_rt = max(worst_rt, np.linalg.norm(back - x0)
                       / max(np.linalg.norm(x0), 1e-300))
        if t >= 2:
            # noiseless state + exact clean estimate: the posterior mean must
            # land exactly on the noiseless state one step earlier
            xt_clean = np.sqrt(sched.abar(t)) * x0
            mu = posterior_mean(xt_clean, x0, t, sched)
            want = np.sqrt(sched.abar(t - 1)) * x0
            worst_pm = max(worst_pm, np.linalg.norm(mu - want)
                           / max(np.linalg.norm(want), 1e-300))
    var1 = sched.posterior_variance(1)
    el = time.perf_counter() - t0
    ok = worst_rt < 1e-9 and worst_pm < 1e-9 and var1 == 0.0 and el < 5.0
    _verdict(1, ok, f"round-trip rel {worst_rt:.2e}, posterior rel "
                    f"{worst_pm:.2e}, tilde-beta(1) = {var1}, {el:.2f}s")


# -------------------------------------------- 2: distribution recovery

def test_criterion_2_mixture_recovery():
    t0 = time.perf_counter()
    sched = make_linear_schedule(1000)
    gm = GaussianMixture(weights=[0.5, 0.5], means=[-1.0, 1.0],
                         sigmas=[0.1, 0.1])
    rng = np.random.default_rng(7)
    n = 20_000
    x = rng.normal(size=n)
    for t in range(sched.T, 0, -1):
        x0_hat = gm_predict_x0(x, t, sched, gm)
        x = ddpm_step(x, x0_hat, t, sched, rng)

    pos = x > 0.0
    w_hat = pos.mean()
    m_pos = x[pos].mean()
    m_neg = x[~pos].mean()

    # independent oracle: direct i.i.d. mixture draws must satisfy the same
    # tolerances, i.e. the bounds are wider than pure estimator noise
    rng_o = np.random.default_rng(8)
    comp = rng_o.random(n) < 0.5
    direct = np.where(comp, 1.0, -1.0) + 0.1 * rng_o.normal(size=n)
    ow = (direct > 0).mean()
    om_pos = direct[direct > 0].mean()
    om_neg = direct[direct < 0].mean()
    oracle_ok = (abs(ow - 0.5) < 0.03 and abs(om_pos - 1.0) < 0.02
                 and abs(om_neg + 1.0) < 0.02)

    el = time.perf_counter() - t0
    ok = (abs(w_hat - 0.5) < 0.03 and abs(m_pos - 1.0) < 0.02
          and abs(m_neg + 1.0) < 0.02 and oracle_ok and el < 60.0)
    _verdict(2, ok, f"weights {w_hat:.3f}/{1 - w_hat:.3f}, modes "
                    f"{m_neg:+.4f}/{m_pos:+.4f}, oracle in-bounds "
                    f"{oracle_ok}, {el:.1f}s")


# ------------------------------------------------- 3: rasterizer vs oracle

def _random_cloud(n, seed, extent=0.4):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return SplatCloud(
        positions=d * extent * rng.uniform(0.3, 1.0, size=(n, 1)),
        scales=rng.uniform(0.08, 0.16, size=(n, 3)),
        rotations=q,
        opacities=rng.uniform(0.3, 0.95, size=n),
        colors=rng.uniform(0.05, 0.95, size=(n, 3)),
        scene_scale=1.0,
    )


def _composite_ray_minima(cloud, cam, bg):
    """Per-pixel reference: closed-form Gaussian minimum along each ray,
    composited front-to-back. Shares no code with the rasterizer."""
    H, W = cam.height, cam.width
    xn = (np.arange(W) + 0.5 - cam.cx) / cam.fx
    yn = (np.arange(H) + 0.5 - cam.cy) / cam.fy
    n = np.stack(np.broadcast_arrays(xn[None, :], yn[:, None],
                                     np.ones((H, W))), axis=-1)
    R = quat_to_rot(cloud.rotations)
    covs = np.einsum("nij,nj,nkj->nik", R, cloud.scales ** 2, R)
    mu_cam = cloud.positions @ cam.rotation.T + cam.translation
    out = np.zeros((H, W, 3))
    T = np.ones((H, W))
    for i in np.argsort(mu_cam[:, 2], kind="stable"):
        if mu_cam[i, 2] <= Z_NEAR:
            continue
        Minv = np.linalg.inv(cam.rotation @ covs[i] @ cam.rotation.T)
        A = np.einsum("hwi,ij,hwj->hw", n, Minv, n)
        B = np.einsum("hwi,ij,j->hw", n, Minv, mu_cam[i])
        C = mu_cam[i] @ Minv @ mu_cam[i]
        s = np.clip(B / A, Z_NEAR, None)
        qmin = A * s ** 2 - 2.0 * B * s + C
        alpha = np.where(qmin <= FOOTPRINT_SIGMA ** 2,
                         cloud.opacities[i] * np.exp(-0.5 * np.maximum(qmin, 0.0)),
                         0.0)
        live = T >= T_MIN
        w = np.where(live, T * alpha, 0.0)
        out += w[:, :, None] * cloud.colors[i]
        T = np.where(live, T * (1.0 - alpha), T)
    return out + T[:, :, None] * np.asarray(bg)


def test_criterion_3_rasterizer_correctness():
    t0 = time.perf_counter()
    worst_max = worst_mean = 0.0
    for seed in range(3):
        cloud = _random_cloud(8, seed=seed)
        cam = orbit_camera(0.3 + 0.7 * seed, 0.25 - 0.15 * seed, 2.0, size=64)
        bg = (0.1, 0.2, 0.3)
        got = render(cloud, cam, background=bg).color
        want = _composite_ray_minima(cloud, cam, bg)
        err = np.abs(got - want)
        worst_max = max(worst_max, err.max())
        worst_mean = max(worst_mean, err.mean())

    cloud = _random_cloud(8, seed=3)
    cam = orbit_camera(0.4, 0.1, 2.0, size=64)
    a = render(cloud, cam, background=BG)
    perm = np.random.default_rng(5).permutation(len(cloud))
    shuffled = SplatCloud(positions=cloud.positions[perm],
                          scales=cloud.scales[perm],
                          rotations=cloud.rotations[perm],
                          opacities=cloud.opacities[perm],
                          colors=cloud.colors[perm],
                          scene_scale=cloud.scene_scale)
    b = render(shuffled, cam, background=BG)
    perm_exact = (np.array_equal(a.color, b.color)
                  and np.array_equal(a.alpha, b.alpha))

    el = time.perf_counter() - t0
    ok = (worst_max < 2e-2 and worst_mean < 5e-3 and perm_exact and el < 30.0)
    _verdict(3, ok, f"max err {worst_max:.2e}, mean err {worst_mean:.2e}, "
                    f"permutation bit-exact {perm_exact}, {el:.1f}s")


# --------------------------------------------------- 4: gradient fidelity

def test_criterion_4_gradient_fidelity():
    fs, tmin = 12.0, 0.0          # wide footprint: no truncation kinks
    step = {"positions": 1e-5, "scales": 1e-5, "rotations": 1e-5,
            "opacities": 1e-6, "colors": 1e-6}
    cloud = _random_cloud(4, seed=11, extent=0.25)
    cloud.scales = np.clip(cloud.scales, 0.08, 0.12)
    cam = orbit_camera(0.5, 0.2, 2.0, size=40)
    G = np.random.default_rng(3).normal(size=(cam.height, cam.width, 3))

    def loss():
        img = render(cloud, cam, background=BG, footprint_sigma=fs,
                     t_min=tmin).color
        return float(np.sum(G * img))

    grads, _ = render_gradients(cloud, cam, G, background=BG,
                                footprint_sigma=fs, t_min=tmin)
    worst = 0.0
    detail = []
    for group in ("positions", "scales", "rotations", "opacities", "colors"):
        arr = getattr(cloud, group)
        h = step[group]
        flat = arr.reshape(-1)
        fd = np.zeros(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            lp = loss()
            flat[k] = orig - h
            lm = loss()
            flat[k] = orig
            fd[k] = (lp - lm) / (2.0 * h)
        an = grads[group].reshape(-1)
        rel = (np.linalg.norm(fd - an)
               / max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12))
        worst = max(worst, rel)
        detail.append(f"{group} {rel:.1e}")

    # regularizer gradients against the same central-difference scheme
    loss0, rg = regularizer(cloud, w_op=1.0, w_aniso=3.0, kappa=1.5)
    for group, key in (("opacities", "opacity"), ("scales", "scale")):
        arr = getattr(cloud, group)
        h = 1e-6
        flat = arr.reshape(-1)
        fd = np.zeros(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            lp = regularizer(cloud, w_op=1.0, w_aniso=3.0, kappa=1.5)[0]
            flat[k] = orig - h
            lm = regularizer(cloud, w_op=1.0, w_aniso=3.0, kappa=1.5)[0]
            flat[k] = orig
            fd[k] = (lp - lm) / (2.0 * h)
        an = rg[key].reshape(-1)
        rel = (np.linalg.norm(fd - an)
               / max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12))
        worst = max(worst, rel)
        detail.append(f"reg-{key} {rel:.1e}")

    _verdict(4, worst < 1e-3, "rel err " + ", ".join(detail))


# --------------------------------------- 5: trajectory refinement benefit

def _ab_pair(seed, cams, gt, gt01, sched, fit_cfg):
    den = make_oracle_denoiser(OracleDenoiserConfig(
        gt_views=gt, perturb_sigma=0.05, perturb_mode="warp", seed=seed))
    vb, _ = sample_baseline(den, None, cams, sched, steps=50, seed=seed,
                            store_states=False)
    vb01 = np.clip((vb + 1.0) / 2.0, 0.0, 1.0)
    rc, _ = sample_3d_consistent(den, fit_cfg, None, cams, sched, steps=50,
                                 seed=seed, first_iterations=40,
                                 final_iterations=80, store_states=False)
    vr01 = np.stack([render(rc, c, background=BG).color for c in cams])
    res_b = consistency_residual(vb01, cams)
    res_r = consistency_residual(vr01, cams)
    p_b = float(np.mean([psnr(vb01[v], gt01[v]) for v in range(len(cams))]))
    p_r = float(np.mean([psnr(vr01[v], gt01[v]) for v in range(len(cams))]))
    return res_b, res_r, p_b, p_r


def test_criterion_5_refinement_beats_baseline():
    t0 = time.perf_counter()
    cloud = make_blob_cloud(32, seed=42)
    cams = orthogonal_target_rig(radius=2.0, size=48)
    gt01 = np.stack([render(cloud, c, background=BG).color for c in cams])
    gt = gt01 * 2.0 - 1.0
    sched = make_linear_schedule(1000)
    fit_cfg = FitConfig(n_splats=32, iterations=10, background=BG, seed=0)

    wins = 0
    d_psnr = []
    for seed in range(20):
        res_b, res_r, p_b, p_r = _ab_pair(seed, cams, gt, gt01, sched, fit_cfg)
        wins += int(res_r < res_b)
        d_psnr.append(p_r - p_b)
        print(f"  seed {seed:2d}: residual {res_b:.3e} -> {res_r:.3e} "
              f"({'win' if res_r < res_b else 'loss'}), "
              f"psnr {p_b:.2f} -> {p_r:.2f} dB")
    gain = float(np.mean(d_psnr))
    el = time.perf_counter() - t0
    ok = wins >= 18 and gain >= 0.5 and el < 900.0
    _verdict(5, ok, f"residual wins {wins}/20, mean PSNR gain "
                    f"{gain:+.2f} dB (need +0.50), {el:.0f}s")


# ------------------------------------------- 6: exact-oracle convergence

def test_criterion_6_exact_oracle_convergence():
    cloud = make_blob_cloud(32, seed=42)
    cams = orthogonal_target_rig(radius=2.0, size=48)
    gt01 = np.stack([render(cloud, c, background=BG).color for c in cams])
    gt = gt01 * 2.0 - 1.0
    sched = make_linear_schedule(1000)
    den = make_oracle_denoiser(OracleDenoiserConfig(
        gt_views=gt, perturb_sigma=0.0, perturb_mode="warp", seed=0))
    rc, _ = sample_3d_consistent(
        den, FitConfig(n_splats=48, iterations=12, background=BG, seed=0),
        None, cams, sched, steps=50, seed=0, first_iterations=60,
        final_iterations=400, store_states=False)
    views = np.stack([render(rc, c, background=BG).color for c in cams])
    p = float(np.mean([psnr(views[v], gt01[v]) for v in range(len(cams))]))
    _verdict(6, p > 30.0, f"refined target-view PSNR {p:.2f} dB (need > 30)")


# ------------------------------------------------------------- 7: meshing

def test_criterion_7_meshing():
    t0 = time.perf_counter()
    mesh = extract_textured_mesh(make_sphere_cloud(), n_views=36,
                                 voxel_size=0.01, background=BG,
                                 radius=2.0, size=64)
    r = np.linalg.norm(mesh.vertices, axis=1)
    splat_err = float(np.abs(r - 0.5).mean())

    n, voxel = 131, 0.01
    vol = TsdfVolume.create(origin=(-0.65, -0.65, -0.65), voxel_size=voxel,
                            dims=(n, n, n))
    d = np.linalg.norm(vol.grid_points(), axis=1) - 0.5
    vol.sdf_sum[:] = np.clip(d, -vol.truncation, vol.truncation
                             ).reshape(vol.dims)
    vol.w_sum[:] = 1.0
    analytic = marching_cubes(vol)
    ra = np.linalg.norm(analytic.vertices, axis=1)
    analytic_err = float(np.abs(ra - 0.5).mean())

    el = time.perf_counter() - t0
    ok = splat_err < 0.02 and analytic_err < 0.005
    _verdict(7, ok, f"splat-sphere radial err {splat_err:.4f} m (need < 0.02),"
                    f" analytic-SDF err {analytic_err:.5f} m (need < 0.005), "
                    f"{el:.0f}s")


# ------------------------------------------------------- 8: metric sanity

def test_criterion_8_metric_sanity():
    rng = np.random.default_rng(0)
    a = rng.random((100, 3))
    img = rng.random((24, 24, 3))

    n, voxel = 31, 0.04
    vol = TsdfVolume.create(origin=(-0.6, -0.6, -0.6), voxel_size=voxel,
                            dims=(n, n, n))
    d = np.linalg.norm(vol.grid_points(), axis=1) - 0.4
    vol.sdf_sum[:] = np.clip(d, -vol.truncation, vol.truncation
                             ).reshape(vol.dims)
    vol.w_sum[:] = 1.0
    mesh = marching_cubes(vol)

    ident = (chamfer(a, a) == 0.0 and fscore(a, a) == 1.0
             and normal_consistency(mesh, mesh) > 1.0 - 1e-9
             and ssim(img, img) == 1.0 and psnr(img, img) == 99.0)

    hand = chamfer(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]))
    import inspect
    thr = inspect.signature(fscore).parameters["threshold"].default

    b = rng.random((100, 3)) * 0.5
    d2 = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    brute_cd = 100.0 * 0.5 * (d2.min(axis=1).mean() + d2.min(axis=0).mean())
    brute_f = 0.0
    prec = (d2.min(axis=1) < thr).mean()
    rec = (d2.min(axis=0) < thr).mean()
    if prec + rec > 0:
        brute_f = 2.0 * prec * rec / (prec + rec)
    agree = (abs(chamfer(a, b) - brute_cd) < 1e-12
             and abs(fscore(a, b) - brute_f) < 1e-12)

    ok = ident and hand == 100.0 and thr == 0.01 and agree
    _verdict(8, ok, f"identity checks {ident}, CD(0,1m) = {hand} cm, "
                    f"default threshold {thr} m, kdtree == brute force {agree}")


# ------------------------------------------------------ 9: end-to-end demo

def test_criterion_9_end_to_end_demo(tmp_path):
    cfg = {"n_splats": 32, "image_size": 48, "steps": 12, "seeds": [0, 1, 2],
           "recon_splats": 24, "recon_iterations": 12, "first_iterations": 40,
           "final_iterations": 60, "residual_splats": 32,
           "residual_iterations": 80, "mesh_views": 36, "voxel_size": 0.01,
           "out": str(tmp_path / "demo")}
    cfg_path = tmp_path / "demo.json"
    cfg_path.write_text(json.dumps(cfg))
    out = Path(cfg["out"])

    def pipeline():
        assert cli_main(["make-scene", "--config", str(cfg_path)]) == 0
        assert cli_main(["sample", "--config", str(cfg_path)]) == 0
        assert cli_main(["mesh", "--config", str(cfg_path)]) == 0
        assert cli_main(["eval", "--config", str(cfg_path),
                         "--pred", str(out / "runs" / "refined" / "0"),
                         "--gt", str(out / "scene")]) == 0

    t0 = time.perf_counter()
    pipeline()
    el = time.perf_counter() - t0

    table = (out / "runs" / "ab_summary.csv").read_text().splitlines()
    assert len(table) == 4            # header + 3 seeds
    snapshot = {p.relative_to(out): p.read_bytes()
                for p in sorted(out.rglob("*")) if p.is_file()}
    pipeline()
    after = {p.relative_to(out): p.read_bytes()
             for p in sorted(out.rglob("*")) if p.is_file()}
    identical = (set(snapshot) == set(after)
                 and all(snapshot[k] == after[k] for k in snapshot))
    ok = el < 300.0 and identical
    _verdict(9, ok, f"pipeline {el:.0f}s (need < 300), re-run byte-identical "
                    f"{identical}, {len(snapshot)} artifacts")
