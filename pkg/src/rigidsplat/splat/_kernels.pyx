# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Per-pixel alpha compositing, forward and reverse mode.

Gaussians arrive already projected, depth-sorted and binned into tiles
(CSR layout: ``tile_offsets`` / ``entry_gauss``).  Tiles are independent, so
they are processed in parallel; every gradient is written to a slot owned by
one (tile, gaussian) entry, which keeps the result independent of the
thread schedule.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport parallel, prange
from libc.math cimport exp
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef cnp.int64_t i64


def composite_forward(const double[:, ::1] mean2d, const double[:, ::1] conic,
                      const double[::1] opacity, const double[:, ::1] color,
                      const i64[::1] tile_offsets, const i64[::1] entry_gauss,
                      int width, int height, int tile, const double[::1] background,
                      double extent2, double alpha_thr, int num_threads):
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int ntiles = ntx * nty
    image_arr = np.zeros((height, width, 3), dtype=np.float64)
    trans_arr = np.ones((height, width), dtype=np.float64)
    winner_arr = np.full((height, width), -1, dtype=np.int64)
    ncontrib_arr = np.zeros((height, width), dtype=np.int64)
    cdef double[:, :, ::1] image = image_arr
    cdef double[:, ::1] trans = trans_arr
    cdef i64[:, ::1] winner = winner_arr
    cdef i64[:, ::1] ncontrib = ncontrib_arr
    cdef int t, tx, ty, x, y
    cdef i64 e, g, best_g, n
    cdef double T, dx, dy, q, G, a, w, best_w, c0, c1, c2

    with nogil, parallel(num_threads=num_threads):
        for t in prange(ntiles, schedule="static"):
            tx = t % ntx
            ty = t // ntx
            for y in range(ty * tile, min((ty + 1) * tile, height)):
                for x in range(tx * tile, min((tx + 1) * tile, width)):
                    T = 1.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    best_w = -1.0
                    best_g = -1
                    n = 0
                    for e in range(tile_offsets[t], tile_offsets[t + 1]):
                        g = entry_gauss[e]
                        dx = x - mean2d[g, 0]
                        dy = y - mean2d[g, 1]
                        q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                        if q > extent2:
                            continue
                        G = exp(-0.5 * q)
                        a = opacity[g] * G
                        if a < alpha_thr:
                            continue
                        w = a * T
                        c0 = c0 + w * color[g, 0]
                        c1 = c1 + w * color[g, 1]
                        c2 = c2 + w * color[g, 2]
                        if w > best_w:
                            best_w = w
                            best_g = g
                        T = T * (1.0 - a)
                        n = n + 1
                    image[y, x, 0] = c0 + T * background[0]
                    image[y, x, 1] = c1 + T * background[1]
                    image[y, x, 2] = c2 + T * background[2]
                    trans[y, x] = T
                    winner[y, x] = best_g
                    ncontrib[y, x] = n
    return image_arr, trans_arr, winner_arr, ncontrib_arr


def composite_backward(const double[:, ::1] mean2d, const double[:, ::1] conic,
                       const double[::1] opacity, const double[:, ::1] color,
                       const i64[::1] tile_offsets, const i64[::1] entry_gauss,
                       int width, int height, int tile, const double[::1] background,
                       double extent2, double alpha_thr, const double[:, :, ::1] grad_image,
                       int max_len, int num_threads):
    """Return per-entry gradients ``(E, 9)``: mean2d(2), conic(3), opacity, color(3)."""
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int ntiles = ntx * nty
    cdef i64 n_entries = entry_gauss.shape[0]
    out_arr = np.zeros((n_entries, 9), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef int t, tx, ty, x, y, k, cnt
    cdef i64 e, g
    cdef double T, dx, dy, q, G, a, w, r0, r1, r2, gc0, gc1, gc2, ga, gG, gq
    cdef i64* ent
    cdef double* alph
    cdef double* gval
    cdef double* tbuf
    cdef double* dxs
    cdef double* dys
    cdef int cap = max_len if max_len > 0 else 1

    with nogil, parallel(num_threads=num_threads):
        ent = <i64*> malloc(cap * sizeof(i64))
        alph = <double*> malloc(cap * sizeof(double))
        gval = <double*> malloc(cap * sizeof(double))
        tbuf = <double*> malloc(cap * sizeof(double))
        dxs = <double*> malloc(cap * sizeof(double))
        dys = <double*> malloc(cap * sizeof(double))
        for t in prange(ntiles, schedule="static"):
            tx = t % ntx
            ty = t // ntx
            for y in range(ty * tile, min((ty + 1) * tile, height)):
                for x in range(tx * tile, min((tx + 1) * tile, width)):
                    # replay the forward pass, remembering each contributor
                    T = 1.0
                    cnt = 0
                    for e in range(tile_offsets[t], tile_offsets[t + 1]):
                        g = entry_gauss[e]
                        dx = x - mean2d[g, 0]
                        dy = y - mean2d[g, 1]
                        q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                        if q > extent2:
                            continue
                        G = exp(-0.5 * q)
                        a = opacity[g] * G
                        if a < alpha_thr:
                            continue
                        ent[cnt] = e
                        alph[cnt] = a
                        gval[cnt] = G
                        tbuf[cnt] = T
                        dxs[cnt] = dx
                        dys[cnt] = dy
                        cnt = cnt + 1
                        T = T * (1.0 - a)
                    gc0 = grad_image[y, x, 0]
                    gc1 = grad_image[y, x, 1]
                    gc2 = grad_image[y, x, 2]
                    # colour seen behind the current contributor
                    r0 = background[0]
                    r1 = background[1]
                    r2 = background[2]
                    for k in range(cnt - 1, -1, -1):
                        e = ent[k]
                        g = entry_gauss[e]
                        a = alph[k]
                        T = tbuf[k]
                        w = a * T
                        out[e, 6] += w * gc0
                        out[e, 7] += w * gc1
                        out[e, 8] += w * gc2
                        ga = T * (gc0 * (color[g, 0] - r0) + gc1 * (color[g, 1] - r1)
                                  + gc2 * (color[g, 2] - r2))
                        r0 = a * color[g, 0] + (1.0 - a) * r0
                        r1 = a * color[g, 1] + (1.0 - a) * r1
                        r2 = a * color[g, 2] + (1.0 - a) * r2
                        G = gval[k]
                        out[e, 5] += ga * G
                        gG = ga * opacity[g]
                        gq = -0.5 * G * gG
                        dx = dxs[k]
                        dy = dys[k]
                        out[e, 2] += gq * dx * dx
                        out[e, 3] += gq * 2.0 * dx * dy
                        out[e, 4] += gq * dy * dy
                        out[e, 0] += -gq * 2.0 * (conic[g, 0] * dx + conic[g, 1] * dy)
                        out[e, 1] += -gq * 2.0 * (conic[g, 1] * dx + conic[g, 2] * dy)
        free(ent)
        free(alph)
        free(gval)
        free(tbuf)
        free(dxs)
        free(dys)
    return out_arr
