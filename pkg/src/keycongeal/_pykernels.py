"""Pure numpy implementations of the hot kernels.

Mirrors ``_ckernels.pyx`` one to one; used when the compiled module is not
available or when ``KEYCONGEAL_PURE_PYTHON`` is set.
"""
import numpy as np


def normal_equations(start, end, weights, lin=None):
    start = np.ascontiguousarray(start, dtype=float)
    end = np.ascontiguousarray(end, dtype=float)
    w = np.ascontiguousarray(weights, dtype=float)
    lin = end if lin is None else np.ascontiguousarray(lin, dtype=float)
    wx, wy = start[:, 0], start[:, 1]
    u, v = end[:, 0], end[:, 1]
    lu, lv = lin[:, 0], lin[:, 1]
    n = len(w)
    one, zero = np.ones(n), np.zeros(n)
    jx = np.stack([wx, wy, one, zero, zero, zero, -lu * wx, -lu * wy], axis=1)
    jy = np.stack([zero, zero, zero, wx, wy, one, -lv * wx, -lv * wy], axis=1)
    ex = wx - u
    ey = wy - v
    A = (jx * w[:, None]).T @ jx + (jy * w[:, None]).T @ jy
    b = jx.T @ (w * ex) + jy.T @ (w * ey)
    return A, b


def bilinear_sample(image, xs, ys, eps=1e-6):
    """Sample ``image`` at float coordinates with border clamping.

    Returns ``(values, valid)`` where ``valid`` marks points inside the pixel
    grid (within ``eps``).
    """
    image = np.ascontiguousarray(image, dtype=float)
    h, w = image.shape
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    valid = (xs >= -eps) & (xs <= w - 1 + eps) & (ys >= -eps) & (ys <= h - 1 + eps)
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = image[y0, x0] * (1.0 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1.0 - fx) + image[y1, x1] * fx
    vals = top * (1.0 - fy) + bot * fy
    return vals, valid


def splat_gaussians(width, height, xs, ys, sigmas, truncate=6.0):
    """Sum of unnormalized isotropic Gaussians on a ``height x width`` grid.

    Each Gaussian is evaluated inside a ``truncate * sigma`` window.
    """
    grid = np.zeros((height, width))
    for x, y, s in zip(np.asarray(xs, float), np.asarray(ys, float), np.asarray(sigmas, float)):
        r = truncate * s
        c0 = max(int(np.floor(x - r)), 0)
        c1 = min(int(np.ceil(x + r)), width - 1)
        r0 = max(int(np.floor(y - r)), 0)
        r1 = min(int(np.ceil(y + r)), height - 1)
        if c0 > c1 or r0 > r1:
            continue
        gx = np.exp(-((np.arange(c0, c1 + 1) - x) ** 2) / (2 * s * s))
        gy = np.exp(-((np.arange(r0, r1 + 1) - y) ** 2) / (2 * s * s))
        grid[r0:r1 + 1, c0:c1 + 1] += gy[:, None] * gx[None, :]
    return grid
