"""Homography algebra and the per-frame congealing update.

Homographies are plain ``(3, 3)`` float64 arrays mapping frame-local pixel
coordinates to the global motion-compensated coordinate (GMCC), always
renormalized so that ``H[2, 2] == 1``.
"""
from __future__ import annotations

import numpy as np

from . import kernels

# Translation entries (p3, p6) are left unregularized.
DEFAULT_MASK = np.array([1, 1, 0, 1, 1, 0, 1, 1], dtype=float)

_DET_EPS = 1e-12
_DENOM_EPS = 1e-9


class GeometryError(ValueError):
    """Base class for degenerate geometric configurations."""


class SingularHomographyError(GeometryError):
    pass


class DegenerateWarpError(GeometryError):
    """A point maps to (or near) infinity under the warp."""


class SingularSystemError(GeometryError):
    """The regularized normal matrix cannot be factored."""


def normalize(H):
    H = np.asarray(H, dtype=float).reshape(3, 3)
    d = H[2, 2]
    if not np.isfinite(d) or abs(d) < _DET_EPS:
        raise SingularHomographyError("cannot renormalize: H[2,2] is zero")
    Hn = H / d
    Hn[2, 2] = 1.0
    return Hn


def check_invertible(H):
    det = np.linalg.det(H)
    if not np.isfinite(det) or abs(det) <= _DET_EPS:
        raise SingularHomographyError(f"singular homography (det={det:.3g})")
    return H


def identity():
    return np.eye(3)


def translation(tx, ty):
    H = np.eye(3)
    H[0, 2] = tx
    H[1, 2] = ty
    return H


def from_params(p):
    """Build the homography with free entries ``p1..p8`` (row-major, h33=1)."""
    p = np.asarray(p, dtype=float)
    return np.array([[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], 1.0]])


def to_params(H):
    return normalize(H).ravel()[:8].copy()


def warp_point(H, pt):
    x, y = float(pt[0]), float(pt[1])
    d = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    if abs(d) <= _DENOM_EPS:
        raise DegenerateWarpError(f"point ({x}, {y}) maps to infinity")
    return ((H[0, 0] * x + H[0, 1] * y + H[0, 2]) / d,
            (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / d)


def warp_points(H, pts):
    """Vectorized warp of an ``(n, 2)`` array."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    d = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    if np.any(np.abs(d) <= _DENOM_EPS):
        raise DegenerateWarpError("a point maps to infinity")
    out = np.empty_like(pts)
    out[:, 0] = (H[0, 0] * x + H[0, 1] * y + H[0, 2]) / d
    out[:, 1] = (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / d
    return out


def compose(A, B):
    """Homography applying ``B`` first, then ``A``."""
    C = np.asarray(A, dtype=float) @ np.asarray(B, dtype=float)
    return check_invertible(normalize(C))


def invert(H):
    # Adjugate keeps inverses of integer translations exact.
    H = np.asarray(H, dtype=float)
    check_invertible(H)
    a, b, c = H[0]
    d, e, f = H[1]
    g, h, i = H[2]
    adj = np.array([
        [e * i - f * h, c * h - b * i, b * f - c * e],
        [f * g - d * i, a * i - c * g, c * d - a * f],
        [d * h - e * g, b * g - a * h, a * e - b * d],
    ])
    return normalize(adj)


LINEARIZATIONS = ("endpoint", "start")


def jacobian_rows(warped_start, endpoint):
    """x- and y-rows of the warp Jacobian for one link, about the identity increment."""
    wx, wy = float(warped_start[0]), float(warped_start[1])
    u, v = float(endpoint[0]), float(endpoint[1])
    jx = np.array([wx, wy, 1.0, 0.0, 0.0, 0.0, -u * wx, -u * wy])
    jy = np.array([0.0, 0.0, 0.0, wx, wy, 1.0, -v * wx, -v * wy])
    return jx, jy


class WeightedResiduals:
    """Stacked link residuals ``e`` (x-errors then y-errors), Jacobian and weights.

    Built from warped start points ``(wx, wy)``, end points ``(u, v)`` and one
    weight per link; the weight is shared by the x and y entries.  With
    ``linearize="endpoint"`` the projective Jacobian columns use ``(u, v)``;
    with ``"start"`` they use ``(wx, wy)``, where the rows are the exact
    derivative of the warp.
    """

    def __init__(self, start, end, weights, linearize="endpoint"):
        self.start = np.asarray(start, dtype=float).reshape(-1, 2)
        self.end = np.asarray(end, dtype=float).reshape(-1, 2)
        self.weights = np.asarray(weights, dtype=float).ravel()
        n = len(self.start)
        if len(self.end) != n or len(self.weights) != n:
            raise ValueError("start, end and weights must have equal length")
        if linearize not in LINEARIZATIONS:
            raise ValueError(f"linearize must be one of {LINEARIZATIONS}")
        self.linearize = linearize

    def __len__(self):
        return len(self.start)

    @property
    def lin(self):
        return self.end if self.linearize == "endpoint" else self.start

    @property
    def e(self):
        d = self.start - self.end
        return np.concatenate([d[:, 0], d[:, 1]])

    @property
    def w(self):
        return np.concatenate([self.weights, self.weights])

    @property
    def jac(self):
        wx, wy = self.start[:, 0], self.start[:, 1]
        u, v = self.lin[:, 0], self.lin[:, 1]
        n = len(self)
        one, zero = np.ones(n), np.zeros(n)
        jx = np.stack([wx, wy, one, zero, zero, zero, -u * wx, -u * wy], axis=1)
        jy = np.stack([zero, zero, zero, wx, wy, one, -v * wx, -v * wy], axis=1)
        return np.vstack([jx, jy])

    def cost(self):
        d = self.start - self.end
        return float(np.sum(self.weights * (d[:, 0] ** 2 + d[:, 1] ** 2)))

    def normal_equations(self):
        """Return ``(J^T W J, J^T W e)``."""
        return kernels.normal_equations(self.start, self.end, self.weights, self.lin)


def solve_update(r, gamma, mask=DEFAULT_MASK):
    """Regularized Gauss-Newton increment for one frame.

    Solves ``(J^T W J + gamma * diag(mask)) dp = -J^T W e``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    A, b = r.normal_equations()
    A = A + gamma * np.diag(np.asarray(mask, dtype=float))
    if not np.any(b):
        return np.zeros(8)
    dp = _solve_spd(A, -b)
    if not np.all(np.isfinite(dp)):
        raise SingularSystemError("non-finite update")
    return dp


def _solve_spd(A, b):
    # Jacobi scaling first: the projective columns are ~1e5 larger than the rest.
    diag = np.diag(A).copy()
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise SingularSystemError("normal matrix has a non-positive diagonal")
    s = 1.0 / np.sqrt(diag)
    As = A * s[:, None] * s[None, :]
    bs = b * s
    try:
        L = np.linalg.cholesky(As)
        y = np.linalg.solve(L, bs)
        x = np.linalg.solve(L.T, y)
    except np.linalg.LinAlgError:
        if np.linalg.cond(As) > 1e14:
            raise SingularSystemError("rank-deficient normal matrix") from None
        x = np.linalg.solve(As, bs)
    return x * s


def increment_matrix(dp):
    dp = np.asarray(dp, dtype=float)
    if dp.shape != (8,) or not np.all(np.isfinite(dp)):
        raise ValueError("increment must be 8 finite numbers")
    return from_params(dp + np.array([1, 0, 0, 0, 1, 0, 0, 0], dtype=float))


def apply_increment(H, dp):
    """Pre-compose the increment ``I + dp`` (it acts on already-warped points)."""
    inc = increment_matrix(dp)
    try:
        check_invertible(inc)
    except SingularHomographyError as exc:
        raise SingularHomographyError("singular increment") from exc
    return compose(inc, H)


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise GeometryError("degenerate point configuration")
    s = np.sqrt(2.0) / d
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return T


def dlt_homography(src, dst):
    """Normalized DLT fit of ``dst ~ H src`` from ``n >= 4`` correspondences."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise GeometryError(f"need at least 4 correspondences, got {n}")
    T1, T2 = _hartley(src), _hartley(dst)
    a = src @ T1[:2, :2].T + T1[:2, 2]
    b = dst @ T2[:2, :2].T + T2[:2, 2]
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = a
    A[0::2, 2] = 1
    A[0::2, 6:8] = -b[:, [0]] * a
    A[0::2, 8] = -b[:, 0]
    A[1::2, 3:5] = a
    A[1::2, 5] = 1
    A[1::2, 6:8] = -b[:, [1]] * a
    A[1::2, 8] = -b[:, 1]
    _, sv, vt = np.linalg.svd(A, full_matrices=2 * n < 9)
    if n == 4 and sv[-2] < 1e-10 * sv[0]:
        raise GeometryError("degenerate configuration")
    Hn = vt[-1].reshape(3, 3)
    H = invert(T2) @ Hn @ T1
    try:
        return check_invertible(normalize(H))
    except SingularHomographyError as exc:
        raise GeometryError("degenerate configuration") from exc
