# Tile-based splat rasterization kernels (compiled backend).
#
# Splats arrive depth-sorted; tile lists preserve that order, so per-pixel
# compositing is identical to a global painter traversal.  Inclusion rule per
# pixel: q <= qmax and entry transmittance >= t_min (matches kernels_py).

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, INFINITY
from libc.stdlib cimport free, malloc

cnp.import_array()

DEF TILE = 16


cdef inline int imax(int a, int b) nogil:
    return a if a > b else b


cdef inline int imin(int a, int b) nogil:
    return a if a < b else b


def _tile_lists(int[:, ::1] bbox, int H, int W):
    """Per-tile splat index lists in depth order; returns (offsets, lists)."""
    cdef int n_ty = (H + TILE - 1) // TILE
    cdef int n_tx = (W + TILE - 1) // TILE
    cdef int n_tiles = n_ty * n_tx
    cdef int m = bbox.shape[0]
    cdef cnp.ndarray[cnp.int32_t, ndim=1] counts = np.zeros(n_tiles + 1, dtype=np.int32)
    cdef int[::1] cview = counts
    cdef int i, ty, tx, ty0, ty1, tx0, tx1

    for i in range(m):
        ty0 = bbox[i, 0] // TILE
        ty1 = bbox[i, 1] // TILE
        tx0 = bbox[i, 2] // TILE
        tx1 = bbox[i, 3] // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                cview[ty * n_tx + tx + 1] += 1

    cdef cnp.ndarray[cnp.int64_t, ndim=1] offsets = np.cumsum(counts).astype(np.int64)
    cdef long[::1] oview = offsets
    cdef cnp.ndarray[cnp.int32_t, ndim=1] lists = np.empty(offsets[n_tiles], dtype=np.int32)
    cdef int[::1] lview = lists
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cursor = offsets[:n_tiles].copy()
    cdef long[::1] curview = cursor

    for i in range(m):
        ty0 = bbox[i, 0] // TILE
        ty1 = bbox[i, 1] // TILE
        tx0 = bbox[i, 2] // TILE
        tx1 = bbox[i, 3] // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                lview[curview[ty * n_tx + tx]] = i
                curview[ty * n_tx + tx] += 1
    return offsets, lists


def forward(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] depth,
            double[::1] opacity, double[:, ::1] color, int[:, ::1] bbox,
            int H, int W, double[::1] bg, double t_min, double qmax):
    cdef int m = mean2d.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] C_arr = np.zeros((H, W, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] A_arr = np.zeros((H, W))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Z_arr = np.empty((H, W))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Med_arr = np.empty((H, W))
    cdef double[:, :, ::1] C = C_arr
    cdef double[:, ::1] Aimg = A_arr
    cdef double[:, ::1] Zimg = Z_arr
    cdef double[:, ::1] Med = Med_arr

    offsets_arr, lists_arr = _tile_lists(bbox, H, W)
    cdef long[::1] offsets = offsets_arr
    cdef int[::1] lists = lists_arr
    cdef int n_ty = (H + TILE - 1) // TILE
    cdef int n_tx = (W + TILE - 1) // TILE

    cdef int ty, tx, r, c, k, i, tile
    cdef long k0, k1, kk
    cdef double T, Tnew, u, v, dx, dy, q, a, w, zsum, med, c0, c1, c2

    for ty in range(n_ty):
        for tx in range(n_tx):
            tile = ty * n_tx + tx
            k0 = offsets[tile]
            k1 = offsets[tile + 1]
            for r in range(ty * TILE, imin((ty + 1) * TILE, H)):
                for c in range(tx * TILE, imin((tx + 1) * TILE, W)):
                    u = c + 0.5
                    v = r + 0.5
                    T = 1.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    zsum = 0.0
                    med = INFINITY
                    for kk in range(k0, k1):
                        i = lists[kk]
                        if r < bbox[i, 0] or r > bbox[i, 1] or c < bbox[i, 2] or c > bbox[i, 3]:
                            continue
                        dx = u - mean2d[i, 0]
                        dy = v - mean2d[i, 1]
                        q = conic[i, 0] * (dx * dx) + 2.0 * conic[i, 1] * (dx * dy) + conic[i, 2] * (dy * dy)
                        if q > qmax:
                            continue
                        a = opacity[i] * exp(-0.5 * q)
                        w = a * T
                        c0 += w * color[i, 0]
                        c1 += w * color[i, 1]
                        c2 += w * color[i, 2]
                        zsum += w * depth[i]
                        Tnew = T * (1.0 - a)
                        if T >= 0.5 and Tnew < 0.5:
                            med = depth[i]
                        T = Tnew
                        if T < t_min:
                            break
                    C[r, c, 0] = c0 + T * bg[0]
                    C[r, c, 1] = c1 + T * bg[1]
                    C[r, c, 2] = c2 + T * bg[2]
                    Aimg[r, c] = 1.0 - T
                    if 1.0 - T > 1e-6:
                        Zimg[r, c] = zsum / (1.0 - T)
                    else:
                        Zimg[r, c] = INFINITY
                    Med[r, c] = med
    return C_arr, A_arr, Z_arr, Med_arr


def backward(double[:, ::1] mean2d, double[:, ::1] conic, double[::1] depth,
             double[::1] opacity, double[:, ::1] color, int[:, ::1] bbox,
             int H, int W, double[::1] bg, double t_min, double qmax,
             double[:, :, ::1] grad_color):
    cdef int m = mean2d.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gcol_arr = np.zeros((m, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gop_arr = np.zeros(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gmean_arr = np.zeros((m, 2))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gcon_arr = np.zeros((m, 3))
    cdef double[:, ::1] gcol = gcol_arr
    cdef double[::1] gop = gop_arr
    cdef double[:, ::1] gmean = gmean_arr
    cdef double[:, ::1] gcon = gcon_arr
    if m == 0:
        return gcol_arr, gop_arr, gmean_arr, gcon_arr

    offsets_arr, lists_arr = _tile_lists(bbox, H, W)
    cdef long[::1] offsets = offsets_arr
    cdef int[::1] lists = lists_arr
    cdef int n_ty = (H + TILE - 1) // TILE
    cdef int n_tx = (W + TILE - 1) // TILE

    # per-pixel scratch: contributing splat list with its footprint weight and
    # entry transmittance (sized by the largest tile list)
    cdef long max_len = 0
    cdef int t
    for t in range(n_ty * n_tx):
        if offsets[t + 1] - offsets[t] > max_len:
            max_len = offsets[t + 1] - offsets[t]
    cdef int* ibuf = <int*> malloc(max_len * sizeof(int))
    cdef double* Gbuf = <double*> malloc(max_len * sizeof(double))
    cdef double* Tbuf = <double*> malloc(max_len * sizeof(double))
    if ibuf == NULL or Gbuf == NULL or Tbuf == NULL:
        free(ibuf); free(Gbuf); free(Tbuf)
        raise MemoryError()

    cdef int ty, tx, r, c, i, tile, cnt, kk2
    cdef long k0, k1, kk
    cdef double T, u, v, dx, dy, q, G, a, Ti, w
    cdef double A0, A1, A2, B, g0, g1, g2, dalpha, gq, ca, cb, cc

    try:
        for ty in range(n_ty):
            for tx in range(n_tx):
                tile = ty * n_tx + tx
                k0 = offsets[tile]
                k1 = offsets[tile + 1]
                if k0 == k1:
                    continue
                for r in range(ty * TILE, imin((ty + 1) * TILE, H)):
                    for c in range(tx * TILE, imin((tx + 1) * TILE, W)):
                        u = c + 0.5
                        v = r + 0.5
                        T = 1.0
                        cnt = 0
                        for kk in range(k0, k1):
                            i = lists[kk]
                            if r < bbox[i, 0] or r > bbox[i, 1] or c < bbox[i, 2] or c > bbox[i, 3]:
                                continue
                            dx = u - mean2d[i, 0]
                            dy = v - mean2d[i, 1]
                            q = conic[i, 0] * (dx * dx) + 2.0 * conic[i, 1] * (dx * dy) + conic[i, 2] * (dy * dy)
                            if q > qmax:
                                continue
                            G = exp(-0.5 * q)
                            ibuf[cnt] = i
                            Gbuf[cnt] = G
                            Tbuf[cnt] = T
                            cnt += 1
                            T = T * (1.0 - opacity[i] * G)
                            if T < t_min:
                                break
                        if cnt == 0:
                            continue
                        g0 = grad_color[r, c, 0]
                        g1 = grad_color[r, c, 1]
                        g2 = grad_color[r, c, 2]
                        A0 = 0.0
                        A1 = 0.0
                        A2 = 0.0
                        B = 1.0
                        for kk2 in range(cnt - 1, -1, -1):
                            i = ibuf[kk2]
                            G = Gbuf[kk2]
                            Ti = Tbuf[kk2]
                            a = opacity[i] * G
                            w = a * Ti
                            gcol[i, 0] += g0 * w
                            gcol[i, 1] += g1 * w
                            gcol[i, 2] += g2 * w
                            dalpha = Ti * (g0 * (color[i, 0] - A0 - bg[0] * B)
                                           + g1 * (color[i, 1] - A1 - bg[1] * B)
                                           + g2 * (color[i, 2] - A2 - bg[2] * B))
                            gop[i] += dalpha * G
                            gq = -0.5 * dalpha * a
                            dx = u - mean2d[i, 0]
                            dy = v - mean2d[i, 1]
                            ca = conic[i, 0]
                            cb = conic[i, 1]
                            cc = conic[i, 2]
                            gmean[i, 0] += -2.0 * gq * (ca * dx + cb * dy)
                            gmean[i, 1] += -2.0 * gq * (cb * dx + cc * dy)
                            gcon[i, 0] += gq * dx * dx
                            gcon[i, 1] += gq * 2.0 * dx * dy
                            gcon[i, 2] += gq * dy * dy
                            A0 = color[i, 0] * a + (1.0 - a) * A0
                            A1 = color[i, 1] * a + (1.0 - a) * A1
                            A2 = color[i, 2] * a + (1.0 - a) * A2
                            B = (1.0 - a) * B
    finally:
        free(ibuf)
        free(Gbuf)
        free(Tbuf)
    return gcol_arr, gop_arr, gmean_arr, gcon_arr
