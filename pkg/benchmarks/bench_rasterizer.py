"""Rasterizer backend shoot-out: compiled kernels vs the numpy fallback.

Times forward rendering and the backward pass on the same scenes, checks the
two backends agree, and prints a speedup table.

    python3 benchmarks/bench_rasterizer.py [--repeats N]
"""
import argparse
import time

import numpy as np

from splatdiff.camera import orbit_camera
from splatdiff.renderer import (available_backends, get_backend, render,
                                render_gradients, set_backend)
from splatdiff.scenes import make_blob_cloud

BG = (1.0, 1.0, 1.0)


def _time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(n_splats, size, repeats):
    cloud = make_blob_cloud(n_splats, seed=3)
    cam = orbit_camera(0.4, 0.2, 2.0, size=size)
    G = np.random.default_rng(0).normal(size=(size, size, 3))

    rows = {}
    images = {}
    for backend in available_backends():
        set_backend(backend)
        fwd = _time(lambda: render(cloud, cam, background=BG), repeats)
        bwd = _time(lambda: render_gradients(cloud, cam, G, background=BG),
                    repeats)
        rows[backend] = (fwd, bwd)
        images[backend] = render(cloud, cam, background=BG).color
    names = sorted(images)
    agree = max(np.abs(images[a] - images[b]).max()
                for a in names for b in names)
    return rows, agree


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    default = get_backend()
    cases = [(32, 64), (128, 64), (128, 128), (512, 128)]
    print(f"backends: {', '.join(available_backends())} "
          f"(default: {default})")
    print(f"{'splats':>7} {'size':>5} {'pass':>8} "
          + "".join(f"{b:>12}" for b in available_backends())
          + f"{'speedup':>10}   max |diff|")
    try:
        for n, size in cases:
            rows, agree = bench(n, size, args.repeats)
            for i, label in enumerate(("forward", "backward")):
                cells = "".join(f"{rows[b][i] * 1e3:>10.2f}ms"
                                for b in available_backends())
                ts = [rows[b][i] for b in available_backends()]
                speed = max(ts) / min(ts)
                tail = f"   {agree:.2e}" if i == 0 else ""
                print(f"{n:>7} {size:>5} {label:>8} {cells}"
                      f"{speed:>9.1f}x{tail}")
    finally:
        set_backend(default)


if __name__ == "__main__":
    main()
