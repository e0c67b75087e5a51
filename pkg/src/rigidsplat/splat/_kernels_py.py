"""Pure numpy compositing kernels, used when the compiled extension is unavailable.

Same inputs and outputs as the Cython module.  Each tile's pixels are
processed together as a vector while Gaussians are visited in depth order.
"""

from __future__ import annotations

import numpy as np


def _tile_pixels(t, ntx, tile, width, height):
    tx, ty = t % ntx, t // ntx
    xs = np.arange(tx * tile, min((tx + 1) * tile, width))
    ys = np.arange(ty * tile, min((ty + 1) * tile, height))
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return yy.reshape(-1), xx.reshape(-1)


def _contrib(g, xx, yy, mean2d, conic, opacity, extent2, alpha_thr):
    dx = xx - mean2d[g, 0]
    dy = yy - mean2d[g, 1]
    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
    G = np.exp(-0.5 * q)
    a = opacity[g] * G
    on = (q <= extent2) & (a >= alpha_thr)
    return dx, dy, G, np.where(on, a, 0.0), on


def composite_forward(mean2d, conic, opacity, color, tile_offsets, entry_gauss, width, height,
                      tile, background, extent2, alpha_thr, num_threads=1):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    image = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    winner = np.full((height, width), -1, dtype=np.int64)
    ncontrib = np.zeros((height, width), dtype=np.int64)
    bg = np.asarray(background, dtype=np.float64)
    for t in range(ntx * nty):
        yy, xx = _tile_pixels(t, ntx, tile, width, height)
        T = np.ones(len(xx))
        C = np.zeros((len(xx), 3))
        best_w = np.full(len(xx), -1.0)
        best_g = np.full(len(xx), -1, dtype=np.int64)
        n = np.zeros(len(xx), dtype=np.int64)
        for e in range(tile_offsets[t], tile_offsets[t + 1]):
            g = entry_gauss[e]
            _, _, _, a, on = _contrib(g, xx, yy, mean2d, conic, opacity, extent2, alpha_thr)
            if not on.any():
                continue
            w = a * T
            C += w[:, None] * color[g]
            better = on & (w > best_w)
            best_w = np.where(better, w, best_w)
            best_g = np.where(better, g, best_g)
            T = T * (1.0 - a)
            n += on
        image[yy, xx] = C + T[:, None] * bg
        trans[yy, xx] = T
        winner[yy, xx] = best_g
        ncontrib[yy, xx] = n
    return image, trans, winner, ncontrib


def composite_backward(mean2d, conic, opacity, color, tile_offsets, entry_gauss, width, height,
                       tile, background, extent2, alpha_thr, grad_image, max_len=0,
                       num_threads=1):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    out = np.zeros((len(entry_gauss), 9))
    bg = np.asarray(background, dtype=np.float64)
    for t in range(ntx * nty):
        lo, hi = tile_offsets[t], tile_offsets[t + 1]
        if hi == lo:
            continue
        yy, xx = _tile_pixels(t, ntx, tile, width, height)
        gimg = grad_image[yy, xx]
        T = np.ones(len(xx))
        saved = []
        for e in range(lo, hi):
            g = entry_gauss[e]
            dx, dy, G, a, on = _contrib(g, xx, yy, mean2d, conic, opacity, extent2, alpha_thr)
            saved.append((e, g, dx, dy, G, a, T))
            T = T * (1.0 - a)
        R = np.broadcast_to(bg, (len(xx), 3)).copy()
        for e, g, dx, dy, G, a, T in reversed(saved):
            w = a * T
            out[e, 6:9] += w @ gimg
            ga = T * np.sum(gimg * (color[g] - R), axis=1)
            R = a[:, None] * color[g] + (1.0 - a[:, None]) * R
            on = a > 0
            ga = np.where(on, ga, 0.0)
            out[e, 5] += np.sum(ga * G)
            gq = -0.5 * G * ga * opacity[g]
            out[e, 2] += np.sum(gq * dx * dx)
            out[e, 3] += np.sum(gq * 2.0 * dx * dy)
            out[e, 4] += np.sum(gq * dy * dy)
            out[e, 0] += np.sum(-gq * 2.0 * (conic[g, 0] * dx + conic[g, 1] * dy))
            out[e, 1] += np.sum(-gq * 2.0 * (conic[g, 1] * dx + conic[g, 2] * dy))
    return out
