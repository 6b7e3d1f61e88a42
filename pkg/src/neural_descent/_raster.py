"""numba kernels for soft and hard rasterization of projected triangles.

Coordinates are raster pixels with pixel (i, j) centred at (j + 0.5, i + 0.5).
Triangle/pixel pairs farther than ``margin`` from the triangle's bounding box
are skipped; their coverage is below exp(-margin**2 / sigma).
"""

from __future__ import annotations

import math

import numba
import numpy as np

EPS_Z = 1e-12


@numba.njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True, inline="always")
def _softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@numba.njit(cache=True, inline="always")
def _segment(px, py, ax, ay, bx, by):
    ex = bx - ax
    ey = by - ay
    wx = px - ax
    wy = py - ay
    ee = ex * ex + ey * ey
    t = 0.0
    if ee > 0.0:
        t = (wx * ex + wy * ey) / ee
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    rx = wx - t * ex
    ry = wy - t * ey
    return rx * rx + ry * ry, t, rx, ry


@numba.njit(cache=True, inline="always")
def _inside(px, py, x0, y0, x1, y1, x2, y2):
    c0 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
    c1 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    c2 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
    return (c0 >= 0.0 and c1 >= 0.0 and c2 >= 0.0) or (c0 <= 0.0 and c1 <= 0.0 and c2 <= 0.0)


@numba.njit(cache=True)
def _pixel_range(lo, hi, margin, n):
    a = int(math.ceil(lo - margin - 0.5))
    b = int(math.floor(hi + margin - 0.5))
    if a < 0:
        a = 0
    if b > n - 1:
        b = n - 1
    return a, b


@numba.njit(cache=True)
def _closest_edge(px, py, v):
    """Squared distance to the boundary and the minimizing edge (first on ties)."""
    best = np.inf
    k_best = 0
    t_best = 0.0
    rx_best = 0.0
    ry_best = 0.0
    for k in range(3):
        a = k
        b = (k + 1) % 3
        d2, t, rx, ry = _segment(px, py, v[a, 0], v[a, 1], v[b, 0], v[b, 1])
        if d2 < best:
            best = d2
            k_best = k
            t_best = t
            rx_best = rx
            ry_best = ry
    return best, k_best, t_best, rx_best, ry_best


@numba.njit(cache=True, inline="always")
def _edges(v, E):
    """E rows: ax, ay, ex, ey, 1/|e|^2 (0 for a degenerate edge)."""
    for k in range(3):
        b = (k + 1) % 3
        ex = v[b, 0] - v[k, 0]
        ey = v[b, 1] - v[k, 1]
        ee = ex * ex + ey * ey
        E[k, 0] = v[k, 0]
        E[k, 1] = v[k, 1]
        E[k, 2] = ex
        E[k, 3] = ey
        E[k, 4] = 1.0 / ee if ee > 0.0 else 0.0


@numba.njit(cache=True, inline="always")
def _pair(px, py, E):
    """(signed distance argument numerator d2, inside, edge, t, rx, ry)."""
    best = np.inf
    kb = 0
    tb = 0.0
    rxb = 0.0
    ryb = 0.0
    npos = 0
    nneg = 0
    for k in range(3):
        wx = px - E[k, 0]
        wy = py - E[k, 1]
        ex = E[k, 2]
        ey = E[k, 3]
        c = ex * wy - ey * wx
        if c > 0.0:
            npos += 1
        elif c < 0.0:
            nneg += 1
        t = (wx * ex + wy * ey) * E[k, 4]
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        rx = wx - t * ex
        ry = wy - t * ey
        d2 = rx * rx + ry * ry
        if d2 < best:
            best = d2
            kb = k
            tb = t
            rxb = rx
            ryb = ry
    inside = npos == 0 or nneg == 0
    return best, inside, kb, tb, rxb, ryb


@numba.njit(cache=True)
def soft_forward(tri, invz, labels, H, W, P, sigma, gamma, margin):
    """Returns image (B,H,W,P+1), log-transmittance S, Z, N, zmax."""
    B, T = invz.shape
    img = np.zeros((B, H, W, P + 1))
    S = np.zeros((B, H, W))
    Z = np.zeros((B, H, W))
    N = np.zeros((B, H, W, P))
    zmax = np.zeros(B)
    E = np.empty((3, 5))
    inv_sigma = 1.0 / sigma
    for b in range(B):
        zm = -np.inf
        for j in range(T):
            if invz[b, j] > zm:
                zm = invz[b, j]
        if T == 0:
            zm = 0.0
        zmax[b] = zm
        for j in range(T):
            v = tri[b, j]
            _edges(v, E)
            xmin = min(v[0, 0], v[1, 0], v[2, 0])
            xmax = max(v[0, 0], v[1, 0], v[2, 0])
            ymin = min(v[0, 1], v[1, 1], v[2, 1])
            ymax = max(v[0, 1], v[1, 1], v[2, 1])
            c0, c1 = _pixel_range(xmin, xmax, margin, W)
            r0, r1 = _pixel_range(ymin, ymax, margin, H)
            wj = math.exp((invz[b, j] - zm) / gamma)
            lab = labels[j]
            for i in range(r0, r1 + 1):
                py = i + 0.5
                for jj in range(c0, c1 + 1):
                    px = jj + 0.5
                    d2, inside, k, t, rx, ry = _pair(px, py, E)
                    x = d2 * inv_sigma
                    if not inside:
                        x = -x
                    e = math.exp(-abs(x))
                    if x >= 0.0:
                        D = 1.0 / (1.0 + e)
                        S[b, i, jj] -= x + math.log1p(e)
                    else:
                        D = e / (1.0 + e)
                        S[b, i, jj] -= math.log1p(e)
                    ew = D * wj
                    Z[b, i, jj] += ew
                    N[b, i, jj, lab] += ew
        for i in range(H):
            for jj in range(W):
                A = -math.expm1(S[b, i, jj])
                zz = Z[b, i, jj] + EPS_Z
                for c in range(P):
                    img[b, i, jj, c] = A * N[b, i, jj, c] / zz
                img[b, i, jj, P] = A
    return img, S, Z, N, zmax


@numba.njit(cache=True)
def soft_backward(gimg, tri, invz, labels, S, Z, N, zmax, sigma, gamma, margin):
    B, T = invz.shape
    H, W = S.shape[1], S.shape[2]
    P = N.shape[3]
    g_tri = np.zeros(tri.shape)
    g_invz = np.zeros(invz.shape)
    gA = np.zeros((H, W))
    gZ = np.zeros((H, W))
    gN = np.zeros((H, W, P))
    E = np.empty((3, 5))
    inv_sigma = 1.0 / sigma
    for b in range(B):
        for i in range(H):
            for jj in range(W):
                trans = math.exp(S[b, i, jj])
                A = 1.0 - trans
                zz = Z[b, i, jj] + EPS_Z
                acc_a = gimg[b, i, jj, P]
                acc_z = 0.0
                for c in range(P):
                    g = gimg[b, i, jj, c]
                    ratio = N[b, i, jj, c] / zz
                    acc_a += g * ratio
                    acc_z -= g * A * ratio / zz
                    gN[i, jj, c] = g * A / zz
                # d(alpha)/dx_j = (1 - alpha) D_j; fold (1 - alpha) in here
                gA[i, jj] = acc_a * trans
                gZ[i, jj] = acc_z
        zm = zmax[b]
        for j in range(T):
            v = tri[b, j]
            _edges(v, E)
            xmin = min(v[0, 0], v[1, 0], v[2, 0])
            xmax = max(v[0, 0], v[1, 0], v[2, 0])
            ymin = min(v[0, 1], v[1, 1], v[2, 1])
            ymax = max(v[0, 1], v[1, 1], v[2, 1])
            c0, c1 = _pixel_range(xmin, xmax, margin, W)
            r0, r1 = _pixel_range(ymin, ymax, margin, H)
            wj = math.exp((invz[b, j] - zm) / gamma)
            lab = labels[j]
            gv = np.zeros((3, 2))
            gz = 0.0
            for i in range(r0, r1 + 1):
                py = i + 0.5
                for jj in range(c0, c1 + 1):
                    px = jj + 0.5
                    d2, inside, k, t, rx, ry = _pair(px, py, E)
                    sgn = 1.0 if inside else -1.0
                    x = sgn * d2 * inv_sigma
                    e = math.exp(-abs(x))
                    if x >= 0.0:
                        D = 1.0 / (1.0 + e)
                        Dm = e * D
                    else:
                        Dm = 1.0 / (1.0 + e)
                        D = e * Dm
                    ge = gN[i, jj, lab] + gZ[i, jj]
                    gx = gA[i, jj] * D + ge * wj * D * Dm
                    gz += ge * D * wj
                    gd2 = 2.0 * gx * sgn * inv_sigma
                    bb = (k + 1) % 3
                    gv[k, 0] -= gd2 * rx * (1.0 - t)
                    gv[k, 1] -= gd2 * ry * (1.0 - t)
                    gv[bb, 0] -= gd2 * rx * t
                    gv[bb, 1] -= gd2 * ry * t
            g_invz[b, j] = gz / gamma
            for k in range(3):
                g_tri[b, j, k, 0] = gv[k, 0]
                g_tri[b, j, k, 1] = gv[k, 1]
    return g_tri, g_invz


@numba.njit(cache=True)
def hard_raster(tri, invz, labels, H, W, P):
    """Nearest-triangle (largest inverse depth) coverage at pixel centres."""
    B, T = invz.shape
    img = np.zeros((B, H, W, P + 1))
    best = np.full((B, H, W), -np.inf)
    owner = np.full((B, H, W), -1, dtype=np.int64)
    for b in range(B):
        for j in range(T):
            v = tri[b, j]
            xmin = min(v[0, 0], v[1, 0], v[2, 0])
            xmax = max(v[0, 0], v[1, 0], v[2, 0])
            ymin = min(v[0, 1], v[1, 1], v[2, 1])
            ymax = max(v[0, 1], v[1, 1], v[2, 1])
            c0, c1 = _pixel_range(xmin, xmax, 0.0, W)
            r0, r1 = _pixel_range(ymin, ymax, 0.0, H)
            area = (v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1]) - (v[1, 1] - v[0, 1]) * (v[2, 0] - v[0, 0])
            if area == 0.0:
                continue
            for i in range(r0, r1 + 1):
                for jj in range(c0, c1 + 1):
                    if _inside(jj + 0.5, i + 0.5, v[0, 0], v[0, 1], v[1, 0], v[1, 1], v[2, 0], v[2, 1]):
                        if invz[b, j] > best[b, i, jj]:
                            best[b, i, jj] = invz[b, j]
                            owner[b, i, jj] = j
        for i in range(H):
            for jj in range(W):
                j = owner[b, i, jj]
                if j >= 0:
                    img[b, i, jj, labels[j]] = 1.0
                    img[b, i, jj, P] = 1.0
    return img


@numba.njit(cache=True)
def edge_distance(tri, H, W):
    """Per-pixel distance to the nearest projected triangle edge, (B, H, W)."""
    B, T = tri.shape[0], tri.shape[1]
    out = np.full((B, H, W), np.inf)
    for b in range(B):
        for j in range(T):
            v = tri[b, j]
            for i in range(H):
                for jj in range(W):
                    d2 = _closest_edge(jj + 0.5, i + 0.5, v)[0]
                    if d2 < out[b, i, jj]:
                        out[b, i, jj] = d2
    return np.sqrt(out)
