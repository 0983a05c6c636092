"""Keypoint detection, description and ratio-test matching.

The detector is a Harris corner response evaluated on a Gaussian pyramid;
descriptors are 64-d gradient patches.  Everything downstream only needs
positions, scales and descriptors, so keypoints can also be injected from
JSON files (see :func:`load_keypoints`).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels

DESCRIPTOR_SIZE = 64
DEFAULT_RATIO = 0.8
DEFAULT_BUDGET = 500


@dataclass
class Frame:
    id: int
    image: np.ndarray

    def __post_init__(self):
        img = np.asarray(self.image, dtype=float)
        if img.ndim != 2:
            raise ValueError("frames are grayscale 2-D rasters")
        if img.shape[0] < 16 or img.shape[1] < 16:
            raise ValueError(f"frame {self.id} is smaller than 16x16")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError(f"frame {self.id} has values outside [0, 1]")
        self.image = img

    @property
    def width(self):
        return self.image.shape[1]

    @property
    def height(self):
        return self.image.shape[0]


@dataclass(frozen=True)
class Keypoint:
    frame_id: int
    pos: tuple
    scale: float
    norm_scale: float
    response: float
    descriptor: np.ndarray = field(repr=False)


@dataclass
class KeypointSet:
    """All keypoints of one frame, stored column-wise."""

    frame_id: int
    pos: np.ndarray
    scale: np.ndarray
    response: np.ndarray
    descriptors: np.ndarray
    norm_scale: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float).reshape(-1, 2)
        n = len(self.pos)
        self.scale = np.asarray(self.scale, dtype=float).reshape(n)
        self.response = np.asarray(self.response, dtype=float).reshape(n)
        desc = np.asarray(self.descriptors, dtype=float)
        if desc.size == 0:
            dim = desc.shape[-1] if desc.ndim == 2 else DESCRIPTOR_SIZE
            desc = np.zeros((0, dim))
        self.descriptors = desc.reshape(n, desc.shape[-1] if n == 0 else -1)
        if self.norm_scale is None:
            self.norm_scale = np.ones(n)
        else:
            self.norm_scale = np.asarray(self.norm_scale, dtype=float).reshape(n)

    def __len__(self):
        return len(self.pos)

    def __getitem__(self, k):
        return Keypoint(self.frame_id, (float(self.pos[k, 0]), float(self.pos[k, 1])),
                        float(self.scale[k]), float(self.norm_scale[k]),
                        float(self.response[k]), self.descriptors[k])

    def subset(self, idx):
        idx = np.asarray(idx)
        return KeypointSet(self.frame_id, self.pos[idx], self.scale[idx], self.response[idx],
                           self.descriptors[idx], self.norm_scale[idx],
                           {k: np.asarray(v)[idx] for k, v in self.extra.items()})


@dataclass
class DetectorConfig:
    n_levels: int = 3
    sigma_d: float = 1.0
    sigma_i: float = 1.5
    harris_k: float = 0.04
    rel_floor: float = 1e-4
    border: int = 2


def _pyramid(image, n_levels):
    levels = [image]
    for _ in range(1, n_levels):
        prev = levels[-1]
        if min(prev.shape) < 16:
            break
        levels.append(ndimage.gaussian_filter(prev, 1.0, mode="nearest")[::2, ::2])
    return levels


def harris_response(image, sigma_d=1.0, sigma_i=1.5, k=0.04):
    ix = ndimage.gaussian_filter(image, sigma_d, order=(0, 1), mode="nearest")
    iy = ndimage.gaussian_filter(image, sigma_d, order=(1, 0), mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, sigma_i, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, sigma_i, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, sigma_i, mode="nearest")
    return (sxx * syy - sxy * sxy) - k * (sxx + syy) ** 2


def _subpixel(R, r, c):
    dx = dy = 0.0
    h, w = R.shape
    if 0 < c < w - 1:
        den = R[r, c - 1] - 2 * R[r, c] + R[r, c + 1]
        if den < 0:
            dx = float(np.clip(0.5 * (R[r, c - 1] - R[r, c + 1]) / den, -0.5, 0.5))
    if 0 < r < h - 1:
        den = R[r - 1, c] - 2 * R[r, c] + R[r + 1, c]
        if den < 0:
            dy = float(np.clip(0.5 * (R[r - 1, c] - R[r + 1, c]) / den, -0.5, 0.5))
    return dx, dy


def detect(frame, max_count=DEFAULT_BUDGET, config=None):
    """Multi-scale Harris keypoints of ``frame``, strongest first.

    Returns a :class:`KeypointSet` (descriptors included) with at most
    ``max_count`` entries.
    """
    if max_count < 1:
        raise ValueError("max_count must be >= 1")
    cfg = config or DetectorConfig()
    image = frame.image if isinstance(frame, Frame) else np.asarray(frame, dtype=float)
    frame_id = frame.id if isinstance(frame, Frame) else 0
    levels = _pyramid(image, cfg.n_levels)
    responses = [harris_response(L, cfg.sigma_d, cfg.sigma_i, cfg.harris_k) for L in levels]
    rmax = max(float(R.max()) for R in responses)
    if rmax <= 0:
        return _empty(frame_id)
    floor = cfg.rel_floor * rmax

    cand = []
    for lvl, R in enumerate(responses):
        peaks = (R == ndimage.maximum_filter(R, size=3, mode="nearest")) & (R > floor)
        b = max(cfg.border >> lvl, 1)
        peaks[:b, :] = peaks[-b:, :] = False
        peaks[:, :b] = peaks[:, -b:] = False
        rows, cols = np.nonzero(peaks)
        for r, c in zip(rows, cols):
            cand.append((float(R[r, c]), lvl, r, c))
    if not cand:
        return _empty(frame_id)
    # Deterministic order: response desc, then finer level, then raster order.
    cand.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))

    R0 = responses[0]
    kept_pos, kept_scale, kept_resp = [], [], []
    for resp, lvl, r, c in cand:
        f = 2 ** lvl
        scale = cfg.sigma_i * f
        if lvl == 0:
            dx, dy = _subpixel(R0, r, c)
            x, y = c + dx, r + dy
        else:
            x, y = _refine_to_base(R0, c * f, r * f, f, floor)
        ok = True
        for (px, py), ps in zip(kept_pos, kept_scale):
            rad = 2.0 * max(ps, scale)
            if (px - x) ** 2 + (py - y) ** 2 < rad * rad:
                ok = False
                break
        if ok:
            kept_pos.append((x, y))
            kept_scale.append(scale)
            kept_resp.append(resp)
            if len(kept_pos) >= max_count:
                break

    kps = KeypointSet(frame_id, np.array(kept_pos), np.array(kept_scale), np.array(kept_resp),
                      np.zeros((len(kept_pos), DESCRIPTOR_SIZE)))
    kps.descriptors = describe_many(kps.pos, kps.scale, image)
    return kps


def _refine_to_base(R0, x, y, radius, floor):
    """Move a coarse detection onto the strongest full-resolution peak nearby."""
    h, w = R0.shape
    x0, x1 = max(int(x - radius), 0), min(int(x + radius) + 1, w)
    y0, y1 = max(int(y - radius), 0), min(int(y + radius) + 1, h)
    win = R0[y0:y1, x0:x1]
    if win.size == 0 or win.max() <= floor:
        return float(x), float(y)
    r, c = np.unravel_index(int(np.argmax(win)), win.shape)
    dx, dy = _subpixel(R0, y0 + r, x0 + c)
    return x0 + c + dx, y0 + r + dy


def _empty(frame_id):
    return KeypointSet(frame_id, np.zeros((0, 2)), np.zeros(0), np.zeros(0),
                       np.zeros((0, DESCRIPTOR_SIZE)))


_GRID = (np.arange(16) - 7.5) / 16.0  # sample offsets in patch-side units
_WINDOW = np.exp(-(_GRID[:, None] ** 2 + _GRID[None, :] ** 2) / (2 * 0.3 ** 2))


def _gradients(image, sigma):
    gx = ndimage.gaussian_filter(image, sigma, order=(0, 1), mode="nearest")
    gy = ndimage.gaussian_filter(image, sigma, order=(1, 0), mode="nearest")
    return gx, gy


def describe_many(pos, scales, image, _cache=None):
    """Descriptors for many keypoints of one image (see :func:`describe`)."""
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    scales = np.asarray(scales, dtype=float).ravel()
    out = np.zeros((len(pos), DESCRIPTOR_SIZE))
    if len(pos) == 0:
        return out
    cache = {} if _cache is None else _cache
    for s in np.unique(scales):
        idx = np.nonzero(scales == s)[0]
        if s not in cache:
            cache[s] = _gradients(image, max(0.5 * s, 0.8))
        gx, gy = cache[s]
        side = 12.0 * s
        xs = pos[idx, 0][:, None, None] + side * _GRID[None, None, :]
        ys = pos[idx, 1][:, None, None] + side * _GRID[None, :, None]
        xs = np.broadcast_to(xs, (len(idx), 16, 16))
        ys = np.broadcast_to(ys, (len(idx), 16, 16))
        dx, _ = kernels.bilinear_sample(gx, xs, ys)
        dy, _ = kernels.bilinear_sample(gy, xs, ys)
        dx = dx * _WINDOW
        dy = dy * _WINDOW
        cells = []
        for a in (dx, dy, np.abs(dx), np.abs(dy)):
            cells.append(a.reshape(len(idx), 4, 4, 4, 4).sum(axis=(2, 4)))
        d = np.stack(cells, axis=-1).reshape(len(idx), DESCRIPTOR_SIZE)
        d = d - d.mean(axis=1, keepdims=True)
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        out[idx] = np.where(norm > 1e-12, d / np.maximum(norm, 1e-12), 0.0)
    return out


def describe(kp, frame):
    """64-d mean-subtracted, L2-normalized gradient-patch descriptor.

    The patch side is proportional to ``kp.scale``; samples falling outside
    the frame are clamped to the border.
    """
    image = frame.image if isinstance(frame, Frame) else np.asarray(frame, dtype=float)
    return describe_many([kp.pos], [kp.scale], image)[0]


def normalize_scales(keypoint_sets):
    """Set ``norm_scale = scale / max scale`` over the whole stack (in place)."""
    sets = list(keypoint_sets)
    scales = [s.scale for s in sets if len(s)]
    if not scales:
        raise ValueError("no keypoints to normalize")
    smax = max(float(s.max()) for s in scales)
    if smax <= 0:
        raise ValueError("keypoint scales must be positive")
    for s in sets:
        s.norm_scale = s.scale / smax
    return sets


@dataclass
class Matches:
    """Ratio-test matches between two keypoint sets (indices into each)."""

    src_idx: np.ndarray
    dst_idx: np.ndarray
    distance: np.ndarray
    ratio: np.ndarray

    def __len__(self):
        return len(self.src_idx)


def _in_rect(pos, rect):
    if rect is None:
        return np.ones(len(pos), dtype=bool)
    x0, y0, x1, y1 = rect
    return (pos[:, 0] >= x0) & (pos[:, 0] <= x1) & (pos[:, 1] >= y0) & (pos[:, 1] <= y1)


def _pairwise_dist(a, b):
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def match_ratio(src, dst, ratio_threshold=DEFAULT_RATIO, region=None):
    """Mutual nearest-neighbour matches passing the ratio test in both directions.

    ``region`` is an optional ``(src_rect, dst_rect)`` pair of
    ``(x0, y0, x1, y1)`` frame-local rectangles restricting both sides.
    """
    if not 0 < ratio_threshold < 1:
        raise ValueError("ratio_threshold must lie in (0, 1)")
    empty = Matches(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0))
    rs, rd = region if region is not None else (None, None)
    si = np.nonzero(_in_rect(src.pos, rs))[0]
    di = np.nonzero(_in_rect(dst.pos, rd))[0]
    if len(si) == 0 or len(di) == 0:
        return empty
    D = _pairwise_dist(src.descriptors[si], dst.descriptors[di])

    fwd_best, fwd_ratio = _best_and_ratio(D)
    bwd_best, bwd_ratio = _best_and_ratio(D.T)
    rows = np.arange(len(si))
    ok = (bwd_best[fwd_best] == rows) & (fwd_ratio < ratio_threshold)
    ok &= bwd_ratio[fwd_best] < ratio_threshold
    rows = rows[ok]
    cols = fwd_best[ok]
    return Matches(si[rows], di[cols], D[rows, cols], fwd_ratio[rows])


def _best_and_ratio(D):
    n, m = D.shape
    best = np.argmin(D, axis=1)
    d1 = D[np.arange(n), best]
    if m < 2:
        return best, np.zeros(n)
    d2 = np.partition(D, 1, axis=1)[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d2 > 0, d1 / d2, 1.0)
    return best, ratio


def keypoints_to_json(kps, **extra):
    items = []
    for k in range(len(kps)):
        item = {
            "x": float(kps.pos[k, 0]),
            "y": float(kps.pos[k, 1]),
            "scale": float(kps.scale[k]),
            "response": float(kps.response[k]),
            "descriptor": [float(v) for v in kps.descriptors[k]],
        }
        for key, vals in kps.extra.items():
            v = vals[k]
            item[key] = v.item() if hasattr(v, "item") else v
        items.append(item)
    obj = {"frame": int(kps.frame_id), **extra, "keypoints": items}
    return obj


def keypoints_from_json(obj):
    items = obj["keypoints"]
    n = len(items)
    pos = np.array([[it["x"], it["y"]] for it in items], dtype=float).reshape(n, 2)
    desc = [it["descriptor"] for it in items]
    dlen = len(desc[0]) if n else DESCRIPTOR_SIZE
    if any(len(d) != dlen for d in desc):
        raise ValueError(f"frame {obj['frame']}: descriptor lengths differ")
    extra = {}
    known = {"x", "y", "scale", "response", "descriptor"}
    for key in sorted({k for it in items for k in it} - known):
        extra[key] = np.array([it.get(key) for it in items])
    return KeypointSet(int(obj["frame"]), pos,
                       [it.get("scale", 1.0) for it in items],
                       [it.get("response", 0.0) for it in items],
                       np.array(desc, dtype=float).reshape(n, dlen), extra=extra)


def save_keypoints(path, sets, **extra):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([keypoints_to_json(s, **extra) for s in sets], fh)


def load_keypoints(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    sets = [keypoints_from_json(obj) for obj in data]
    lens = {s.descriptors.shape[1] for s in sets if len(s)}
    if len(lens) > 1:
        raise ValueError("descriptor length differs between frames")
    return sorted(sets, key=lambda s: s.frame_id), data
