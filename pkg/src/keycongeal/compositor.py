"""Canvas layout, frame warping, gauge normalization and the measurements built on them.

All rasters are float images in ``[0, 1]``.  A canvas is an integer pixel
grid over the shared coordinate frame; canvas pixel ``(cx, cy)`` sits at
shared coordinates ``(cx + ox, cy + oy)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import geometry, kernels

log = logging.getLogger(__name__)

DEFAULT_CANVAS_CAP = 64_000_000
DEFAULT_TAU_FG = 0.1
OVERLAY, OVER_BACKGROUND = "overlay", "over-background"


class CanvasTooLargeError(ValueError):
    """The warped sequence does not fit within the canvas pixel cap."""


class UndefinedBREError(ValueError):
    """The two warped frames share no background pixels."""


def normalize_gauge(homographies):
    """Left-multiply every transform by the inverse of the mean of the first and last.

    Returns ``(homographies, flagged)``; ``flagged`` is True when the mean was
    singular and the first frame was used as the anchor instead.
    """
    Hs = [geometry.normalize(H) for H in homographies]
    if not Hs:
        return [], False
    mean = 0.5 * (Hs[0] + Hs[-1])
    flagged = False
    try:
        G = geometry.invert(geometry.check_invertible(geometry.normalize(mean)))
    except geometry.GeometryError:
        log.warning("mean of end transforms is singular, anchoring on the first frame")
        G = geometry.invert(Hs[0])
        flagged = True
    return [geometry.compose(G, H) for H in Hs], flagged


@dataclass
class Canvas:
    ox: int
    oy: int
    width: int
    height: int

    @property
    def shape(self):
        return self.height, self.width

    @property
    def to_raster(self):
        """Homography from shared coordinates to canvas pixel coordinates."""
        return geometry.translation(-self.ox, -self.oy)

    def to_json(self):
        return {"ox": self.ox, "oy": self.oy, "width": self.width, "height": self.height}


def frame_corners(size):
    w, h = size
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=float)


def _warped_corners(H, size, frame_id):
    c = frame_corners(size)
    den = H[2, 0] * c[:, 0] + H[2, 1] * c[:, 1] + H[2, 2]
    if np.any(den <= 1e-9):
        raise CanvasTooLargeError(f"frame {frame_id} warps a corner to infinity")
    return geometry.warp_points(H, c)


def canvas_bounds(sizes, homographies, cap=DEFAULT_CANVAS_CAP):
    """Integer canvas containing every warped frame corner.

    ``sizes`` is one ``(w, h)`` shared by all frames or a list of them.
    """
    Hs = list(homographies)
    if not Hs:
        raise ValueError("no frames")
    if np.ndim(sizes) == 1:
        sizes = [tuple(sizes)] * len(Hs)
    lo = np.full(2, np.inf)
    hi = np.full(2, -np.inf)
    for t, (H, size) in enumerate(zip(Hs, sizes)):
        pts = _warped_corners(geometry.normalize(H), size, t)
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
        x0, y0 = np.floor(lo + 1e-9)
        x1, y1 = np.ceil(hi - 1e-9)
        if (x1 - x0 + 1) * (y1 - y0 + 1) > cap:
            raise CanvasTooLargeError(
                f"canvas exceeds {cap} pixels once frame {t} is included")
    x0, y0 = (int(v) for v in np.floor(lo + 1e-9))
    x1, y1 = (int(v) for v in np.ceil(hi - 1e-9))
    return Canvas(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _footprint_box(H, size, canvas):
    pts = geometry.warp_points(H, frame_corners(size)) - [canvas.ox, canvas.oy]
    x0 = max(int(np.floor(pts[:, 0].min())), 0)
    y0 = max(int(np.floor(pts[:, 1].min())), 0)
    x1 = min(int(np.ceil(pts[:, 0].max())), canvas.width - 1)
    y1 = min(int(np.ceil(pts[:, 1].max())), canvas.height - 1)
    return x0, y0, x1, y1


def warp_frame(image, H, canvas):
    """Inverse-warp ``image`` onto ``canvas``; returns ``(raster, valid)``.

    Color images (``h x w x c``) are warped channel by channel.  Invalid
    pixels are zero in the raster.
    """
    image = np.asarray(image, dtype=float)
    h, w = image.shape[:2]
    H = geometry.normalize(H)
    out = np.zeros(canvas.shape + image.shape[2:])
    valid = np.zeros(canvas.shape, dtype=bool)
    x0, y0, x1, y1 = _footprint_box(H, (w, h), canvas)
    if x1 < x0 or y1 < y0:
        return out, valid
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    pts = np.stack([xx.ravel() + canvas.ox, yy.ravel() + canvas.oy], axis=1).astype(float)
    src = geometry.warp_points(geometry.invert(H), pts)
    chans = [image] if image.ndim == 2 else [image[..., k] for k in range(image.shape[2])]
    for k, ch in enumerate(chans):
        vals, ok = kernels.bilinear_sample(ch, src[:, 0], src[:, 1])
        vals = np.where(ok, vals, 0.0).reshape(yy.shape)
        if image.ndim == 2:
            out[y0:y1 + 1, x0:x1 + 1] = vals
        else:
            out[y0:y1 + 1, x0:x1 + 1, k] = vals
    valid[y0:y1 + 1, x0:x1 + 1] = ok.reshape(yy.shape)
    return out, valid


def iter_panorama(frames, homographies, mode=OVERLAY, plate=None, canvas=None):
    """Yield ``(t, canvas_image, coverage)`` for every frame of the motion panorama."""
    if mode not in (OVERLAY, OVER_BACKGROUND):
        raise ValueError(f"unknown panorama mode {mode!r}")
    if mode == OVER_BACKGROUND and plate is None:
        raise ValueError("over-background mode needs a background plate")
    frames = list(frames)
    if canvas is None:
        canvas = plate.canvas if plate is not None else canvas_bounds(
            [f.shape[:2][::-1] for f in frames], homographies)
    acc = np.zeros(canvas.shape + frames[0].shape[2:])
    cov = np.zeros(canvas.shape, dtype=bool)
    if mode == OVER_BACKGROUND:
        base = np.where(plate.valid, np.nan_to_num(plate.image), 0.0)
    for t, (img, H) in enumerate(zip(frames, homographies)):
        warped, ok = warp_frame(img, H, canvas)
        sel = ok if warped.ndim == 2 else ok[..., None]
        if mode == OVERLAY:
            acc = np.where(sel, warped, acc)
            cov |= ok
            yield t, acc.copy(), cov.copy()
        else:
            bg = base if warped.ndim == 2 else np.repeat(base[..., None], warped.shape[2], axis=2)
            yield t, np.where(sel, warped, bg), ok | plate.valid


def render_panorama(frames, homographies, mode=OVERLAY, plate=None, canvas=None):
    """Motion panorama: per-frame canvases and the final mosaic.

    Returns ``(images, mosaic, coverage)``.
    """
    images, cov = [], None
    for _, img, cov in iter_panorama(frames, homographies, mode, plate, canvas):
        images.append(img)
    return images, images[-1], cov


@dataclass
class BackgroundPlate:
    image: np.ndarray
    weight_sum: np.ndarray
    canvas: Canvas

    @property
    def valid(self):
        return self.weight_sum > 0


def reconstruct_background(frames, maps, homographies, canvas=None):
    """Reliability-weighted mean of the warped keyframes.

    ``maps`` are frame-local reliability rasters (arrays or objects with a
    ``grid``); each is warped with its frame's transform.  Uncovered pixels
    are NaN in the plate image.
    """
    frames = [np.asarray(f, dtype=float) for f in frames]
    if canvas is None:
        canvas = canvas_bounds([f.shape[::-1] for f in frames], homographies)
    num = np.zeros(canvas.shape)
    den = np.zeros(canvas.shape)
    for img, rmap, H in zip(frames, maps, homographies):
        grid = np.asarray(getattr(rmap, "grid", rmap), dtype=float)
        if grid.shape != img.shape:
            raise ValueError("reliability map and frame sizes differ")
        warped, ok = warp_frame(img, H, canvas)
        wmap, _ = warp_frame(grid, H, canvas)
        wmap = np.where(ok, wmap, 0.0)
        num += wmap * warped
        den += wmap
    with np.errstate(invalid="ignore", divide="ignore"):
        image = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return BackgroundPlate(image, den, canvas)


def _majority3(mask):
    counts = ndimage.convolve(mask.astype(np.uint8), np.ones((3, 3), np.uint8), mode="constant")
    return counts >= 5


def foreground_difference(frame, H, plate):
    """``|B - I|`` at every frame pixel, with the plate sampled through ``H``; NaN where invalid."""
    frame = np.asarray(frame, dtype=float)
    h, w = frame.shape
    yy, xx = np.mgrid[0:h, 0:w]
    pts = geometry.warp_points(H, np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float))
    pts = pts - [plate.canvas.ox, plate.canvas.oy]
    img = np.nan_to_num(plate.image)
    vals, ok = kernels.bilinear_sample(img, pts[:, 0], pts[:, 1])
    wts, _ = kernels.bilinear_sample(plate.valid.astype(float), pts[:, 0], pts[:, 1])
    good = ok & (wts > 1 - 1e-9)
    diff = np.abs(vals.reshape(h, w) - frame)
    return np.where(good.reshape(h, w), diff, np.nan)


def segment_foreground(frame, H, plate, tau_fg=DEFAULT_TAU_FG, majority=True):
    """Frame-local foreground mask: plate difference above ``tau_fg``, majority filtered."""
    diff = foreground_difference(frame, H, plate)
    with np.errstate(invalid="ignore"):
        mask = np.nan_to_num(diff, nan=0.0) > tau_fg
    return _majority3(mask) if majority else mask


def bre(frame_i, frame_j, H_i, H_j, background_mask=None):
    """Mean absolute difference of two warped frames over their shared background.

    ``background_mask`` is None (everything is background) or a pair of
    frame-local boolean masks, True on background.
    """
    fi = np.asarray(frame_i, dtype=float)
    fj = np.asarray(frame_j, dtype=float)
    masks = background_mask
    canvas = canvas_bounds([fi.shape[::-1], fj.shape[::-1]], [H_i, H_j])
    wa, va = warp_frame(fi, H_i, canvas)
    wb, vb = warp_frame(fj, H_j, canvas)
    sel = va & vb
    if masks is not None:
        ma, _ = warp_frame(np.asarray(masks[0], dtype=float), H_i, canvas)
        mb, _ = warp_frame(np.asarray(masks[1], dtype=float), H_j, canvas)
        sel &= (ma >= 0.5) & (mb >= 0.5)
    n = int(np.count_nonzero(sel))
    if n == 0:
        raise UndefinedBREError("warped frames share no background pixels")
    # Sorting makes the sum independent of argument order, so the metric is
    # symmetric to the last bit.
    d = np.abs(wa[sel] - wb[sel])
    return float(np.sum(np.sort(d)) / n)
