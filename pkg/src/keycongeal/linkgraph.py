"""Dense link structure over a frame stack.

A link is one matched keypoint pair between two frames.  Links are stored
once (``frame_a < frame_b``) and viewed from either endpoint; the weight
schedule decides how much each view counts.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .keypoints import DEFAULT_RATIO, match_ratio

log = logging.getLogger(__name__)

BACKWARD = "backward"
BACKWARD_FORWARD = "backward-forward"
SCHEMES = (BACKWARD, BACKWARD_FORWARD)

OVERLAP_MIN_FRACTION = 0.10


@dataclass
class PruneConfig:
    threshold: float = 3.0
    confidence: float = 0.995
    max_iter: int = 2000
    min_iter: int = 256
    batch: int = 64
    smooth_neighbors: int = 8
    smooth_mad: float = 3.0
    smooth_px: float = 2.0
    refits: int = 5
    refine_top: int = 4


@dataclass
class PruneResult:
    keep: np.ndarray
    H: np.ndarray = None
    ransac_inliers: int = 0


def _pair_seed(seed, a, b):
    return np.random.default_rng([int(seed), int(a), int(b)])


def _minimal_homographies(src, dst, samples):
    """Batched 4-point DLT on pre-normalized coordinates; ``(B, 3, 3)`` or NaN."""
    a = src[samples]  # (B, 4, 2)
    b = dst[samples]
    B = len(samples)
    A = np.zeros((B, 8, 9))
    A[:, 0::2, 0:2] = a
    A[:, 0::2, 2] = 1
    A[:, 0::2, 6:8] = -b[:, :, [0]] * a
    A[:, 0::2, 8] = -b[:, :, 0]
    A[:, 1::2, 3:5] = a
    A[:, 1::2, 5] = 1
    A[:, 1::2, 6:8] = -b[:, :, [1]] * a
    A[:, 1::2, 8] = -b[:, :, 1]
    _, sv, vt = np.linalg.svd(A)
    H = vt[:, -1, :].reshape(B, 3, 3)
    bad = sv[:, -1] < 1e-8 * sv[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        H = H / H[:, 2:3, 2:3]
        det = np.linalg.det(H)
    bad |= ~np.isfinite(det) | (np.abs(det) < 1e-8)
    H[bad] = np.nan
    return H


def _transfer(H, pts):
    """Warp ``pts`` by each of ``B`` homographies: returns ``(B, n, 2)``."""
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    out = np.einsum("bij,nj->bni", H, ph)
    with np.errstate(divide="ignore", invalid="ignore"):
        return out[..., :2] / out[..., 2:3]


def _symmetric_error(H, src, dst):
    """max(forward, backward) transfer distance for each candidate under each H."""
    Hinv = np.linalg.inv(H)
    fwd = np.linalg.norm(_transfer(H, src) - dst[None], axis=-1)
    bwd = np.linalg.norm(_transfer(Hinv, dst) - src[None], axis=-1)
    err = np.maximum(fwd, bwd)
    return np.where(np.isfinite(err), err, np.inf)


def ransac_homography(src, dst, rng, config=None):
    """Seeded RANSAC over 4-point homographies with adaptive iteration count.

    Returns ``(H, inlier_mask)``; ``H`` is None when no consensus of at least
    four points exists.
    """
    cfg = config or PruneConfig()
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    n = len(src)
    none = (None, np.zeros(n, dtype=bool))
    if n < 4:
        return none
    try:
        T1 = geometry._hartley(src)
        T2 = geometry._hartley(dst)
    except geometry.GeometryError:
        return none
    s_n = src @ T1[:2, :2].T + T1[:2, 2]
    d_n = dst @ T2[:2, :2].T + T2[:2, 2]
    T2inv = np.linalg.inv(T2)

    # Models are scored by truncated squared error (MSAC) rather than by the
    # inlier count alone, and the best few of every batch are refined by
    # refitting on their consensus set.  A raw 4-point model from a narrow
    # overlap is noisy; refinement is what lets a clean background model beat
    # one bent to absorb a coherent cluster of slowly moving matches.
    t2 = cfg.threshold ** 2

    def score(H):
        err = _symmetric_error(H[None], src, dst)[0]
        return float(np.minimum(err ** 2, t2).sum()), err <= cfg.threshold

    def refine(H, cost, mask):
        for _ in range(cfg.refits):
            if mask.sum() < 4:
                break
            try:
                Hr = geometry.dlt_homography(src[mask], dst[mask])
            except geometry.GeometryError:
                break
            c, m = score(Hr)
            if not c < cost:
                break
            H, cost, mask = Hr, c, m
        return H, cost, mask

    best_cost, best_H, best_mask = np.inf, None, None
    needed = cfg.max_iter
    done = 0
    while done < min(max(needed, cfg.min_iter), cfg.max_iter):
        B = min(cfg.batch, cfg.max_iter - done)
        samples = np.argsort(rng.random((B, n)), axis=1)[:, :4]
        Hn = _minimal_homographies(s_n, d_n, samples)
        done += B
        ok = np.all(np.isfinite(Hn.reshape(B, -1)), axis=1)
        if not ok.any():
            continue
        Hs = T2inv[None] @ Hn[ok] @ T1[None]
        Hs = Hs / Hs[:, 2:3, 2:3]
        err = _symmetric_error(Hs, src, dst)
        cost = np.minimum(err ** 2, t2).sum(axis=1)
        improved = False
        for k in np.argsort(cost, kind="stable")[:cfg.refine_top]:
            if cost[k] > 2.0 * best_cost:
                break
            H, c, m = refine(Hs[k], float(cost[k]), err[k] <= cfg.threshold)
            if c < best_cost:
                best_cost, best_H, best_mask = c, H, m
                improved = True
        if improved:
            w = best_mask.sum() / n
            denom = np.log(max(1.0 - w ** 4, 1e-12))
            needed = int(np.ceil(np.log(1.0 - cfg.confidence) / denom)) if w < 1 else 0
    if best_H is None or best_mask.sum() < 4:
        return none
    return best_H, best_mask


def smoothness_filter(src, dst, config=None):
    """Reject motion vectors inconsistent with their spatial neighbours.

    A point is rejected when its motion deviates from the median motion of its
    nearest neighbours by more than ``smooth_mad * MAD + smooth_px``.
    """
    cfg = config or PruneConfig()
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    mv = np.asarray(dst, dtype=float).reshape(-1, 2) - src
    n = len(src)
    keep = np.ones(n, dtype=bool)
    k = min(cfg.smooth_neighbors, n - 1)
    if k < 1:
        return keep
    _, nbr = cKDTree(src).query(src, k=k + 1)
    nbr = np.asarray(nbr).reshape(n, k + 1)[:, 1:]
    nv = mv[nbr]  # (n, k, 2)
    med = np.median(nv, axis=1)
    mad = np.median(np.linalg.norm(nv - med[:, None, :], axis=2), axis=1)
    dev = np.linalg.norm(mv - med, axis=1)
    keep &= dev <= cfg.smooth_mad * mad + cfg.smooth_px
    return keep


def prune_pair(src, dst, rng=None, config=None):
    """Robust consensus pruning of one frame pair's candidate matches.

    ``src``/``dst`` are matched ``(n, 2)`` frame-local positions.  Returns a
    :class:`PruneResult` whose ``keep`` mask selects the survivors; fewer than
    four survivors yields an empty selection.
    """
    cfg = config or PruneConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    n = len(src)
    keep = np.zeros(n, dtype=bool)
    H, inl = ransac_homography(src, dst, rng, cfg)
    if H is None:
        return PruneResult(keep)
    idx = np.nonzero(inl)[0]
    smooth = smoothness_filter(src[idx], dst[idx], cfg)
    idx = idx[smooth]
    if len(idx) < 4:
        return PruneResult(keep, H, int(inl.sum()))
    keep[idx] = True
    return PruneResult(keep, H, int(inl.sum()))


def mean_motion(src, dst, rng=None, config=None):
    """Mean of ``src - dst`` over the pruned matches (raw mean as fallback)."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) == 0:
        return None
    vec = src - dst
    if len(src) >= 4:
        res = prune_pair(src, dst, rng, config)
        if res.keep.any():
            return vec[res.keep].mean(axis=0)
    return vec.mean(axis=0)


def accumulate_offsets(pair_translations):
    """Cumulative sum of consecutive-pair translations, frame 0 at the origin."""
    offs = [np.zeros(2)]
    for t in pair_translations:
        offs.append(offs[-1] + np.asarray(t, dtype=float))
    return np.array(offs)


def estimate_translations(keypoint_sets, ratio=DEFAULT_RATIO, seed=0, config=None):
    """Rough per-frame 2-D offsets from consecutive-frame keypoint matches.

    ``keypoint_sets`` is the temporally ordered list of per-frame keypoints.
    Returns ``(offsets, diagnostics)`` where ``offsets[t]`` is frame ``t``'s
    translation into frame-0 coordinates.
    """
    if len(keypoint_sets) < 2:
        raise ValueError("need at least two frames")
    trans, diag = [], []
    for a, b in zip(keypoint_sets[:-1], keypoint_sets[1:]):
        m = match_ratio(a, b, ratio)
        t = None
        if len(m):
            t = mean_motion(a.pos[m.src_idx], b.pos[m.dst_idx],
                            _pair_seed(seed, a.frame_id, b.frame_id), config)
        if t is None:
            log.warning("frames %d-%d: no matches, translation set to zero", a.frame_id, b.frame_id)
            diag.append({"pair": [int(a.frame_id), int(b.frame_id)], "status": "no-matches"})
            t = np.zeros(2)
        trans.append(t)
    return accumulate_offsets(trans), diag


def overlap_region(offset_i, offset_j, size, min_fraction=OVERLAP_MIN_FRACTION):
    """Frame-local rectangles of the overlap of two offset frames, or None.

    ``size`` is ``(w, h)``; rectangles are ``(x0, y0, x1, y1)``.
    """
    w, h = size
    oi = np.asarray(offset_i, dtype=float)
    oj = np.asarray(offset_j, dtype=float)
    x0 = max(oi[0], oj[0])
    y0 = max(oi[1], oj[1])
    x1 = min(oi[0], oj[0]) + w
    y1 = min(oi[1], oj[1]) + h
    if x1 <= x0 or y1 <= y0 or (x1 - x0) * (y1 - y0) < min_fraction * w * h:
        return None
    rect_i = (x0 - oi[0], y0 - oi[1], x1 - oi[0], y1 - oi[1])
    rect_j = (x0 - oj[0], y0 - oj[1], x1 - oj[0], y1 - oj[1])
    return rect_i, rect_j


def _grow(rect, margin):
    x0, y0, x1, y1 = rect
    return (x0 - margin, y0 - margin, x1 + margin, y1 + margin)


@dataclass(frozen=True)
class Link:
    frame_a: int
    frame_b: int
    orig_a: tuple
    orig_b: tuple
    warped_a: tuple
    warped_b: tuple
    s: float
    alive: bool = True


@dataclass
class LinkGraph:
    """Column-wise link storage with a per-frame incidence index."""

    frame_a: np.ndarray
    frame_b: np.ndarray
    kp_a: np.ndarray
    kp_b: np.ndarray
    orig_a: np.ndarray
    orig_b: np.ndarray
    s: np.ndarray
    alive: np.ndarray = None
    pair_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frame_a = np.asarray(self.frame_a, dtype=int)
        self.frame_b = np.asarray(self.frame_b, dtype=int)
        if np.any(self.frame_a >= self.frame_b):
            raise ValueError("links must satisfy frame_a < frame_b")
        self.orig_a = np.asarray(self.orig_a, dtype=float).reshape(-1, 2)
        self.orig_b = np.asarray(self.orig_b, dtype=float).reshape(-1, 2)
        self.s = np.asarray(self.s, dtype=float)
        if self.alive is None:
            self.alive = np.ones(len(self.s), dtype=bool)
        self.warped_a = self.orig_a.copy()
        self.warped_b = self.orig_b.copy()
        self.incident = {}
        frames = np.union1d(self.frame_a, self.frame_b)
        for f in frames:
            self.incident[int(f)] = np.nonzero((self.frame_a == f) | (self.frame_b == f))[0]

    def __len__(self):
        return len(self.s)

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls(z.astype(int), z.astype(int), z.astype(int), z.astype(int),
                   np.zeros((0, 2)), np.zeros((0, 2)), z)

    def link(self, k):
        return Link(int(self.frame_a[k]), int(self.frame_b[k]),
                    tuple(self.orig_a[k]), tuple(self.orig_b[k]),
                    tuple(self.warped_a[k]), tuple(self.warped_b[k]),
                    float(self.s[k]), bool(self.alive[k]))

    def links_of(self, frame):
        return self.incident.get(int(frame), np.zeros(0, dtype=int))

    def refresh(self, frame, H):
        """Recompute warped coordinates of every link touching ``frame``.

        Always from the stored original coordinates, so no numerical error
        accumulates across updates.
        """
        idx = self.links_of(frame)
        if len(idx) == 0:
            return
        ia = idx[self.frame_a[idx] == frame]
        ib = idx[self.frame_b[idx] == frame]
        if len(ia):
            self.warped_a[ia] = geometry.warp_points(H, self.orig_a[ia])
        if len(ib):
            self.warped_b[ib] = geometry.warp_points(H, self.orig_b[ib])

    def refresh_all(self, homographies):
        for f, H in homographies.items():
            self.refresh(f, H)

    def view(self, frame, idx=None):
        """Links of ``frame`` seen from it: ``(idx, start, end, other, s)``."""
        idx = self.links_of(frame) if idx is None else idx
        idx = idx[self.alive[idx]]
        is_a = self.frame_a[idx] == frame
        start = np.where(is_a[:, None], self.warped_a[idx], self.warped_b[idx])
        end = np.where(is_a[:, None], self.warped_b[idx], self.warped_a[idx])
        other = np.where(is_a, self.frame_b[idx], self.frame_a[idx])
        return idx, start, end, other, self.s[idx]

    def to_json(self):
        items = []
        for k in range(len(self)):
            if not self.alive[k]:
                continue
            items.append({"a": int(self.frame_a[k]), "b": int(self.frame_b[k]),
                          "ax": float(self.orig_a[k, 0]), "ay": float(self.orig_a[k, 1]),
                          "bx": float(self.orig_b[k, 0]), "by": float(self.orig_b[k, 1]),
                          "s": float(self.s[k])})
        return {"links": items}

    @classmethod
    def from_json(cls, obj):
        items = obj["links"]
        n = len(items)
        return cls([it["a"] for it in items], [it["b"] for it in items],
                   np.full(n, -1), np.full(n, -1),
                   [[it["ax"], it["ay"]] for it in items],
                   [[it["bx"], it["by"]] for it in items],
                   [it["s"] for it in items])


def scheme_coefficients(scheme):
    """``(alpha, beta)`` for a weighting scheme."""
    if scheme == BACKWARD_FORWARD:
        return 1.0, 1.0
    if scheme == BACKWARD:
        return 0.0, 1.0
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def schedule(base, q, r):
    """``base ** (r ** q)`` elementwise, with a zero base staying zero."""
    base = np.asarray(base, dtype=float)
    expo = r ** q
    with np.errstate(divide="ignore"):
        out = np.where(base > 0, np.power(np.where(base > 0, base, 1.0), expo), 0.0)
    return out


def view_weights(s, other, viewer, scheme, q, r=0.7):
    """Vectorized weights of links seen from ``viewer``."""
    alpha, beta = scheme_coefficients(scheme)
    coef = np.where(np.asarray(other) < viewer, beta, alpha)
    return schedule(coef * np.asarray(s, dtype=float), q, r)


def link_weight(link, viewing_frame, scheme, q, r=0.7):
    if viewing_frame == link.frame_a:
        other = link.frame_b
    elif viewing_frame == link.frame_b:
        other = link.frame_a
    else:
        raise ValueError("viewing frame is not an endpoint of the link")
    return float(view_weights([link.s], [other], viewing_frame, scheme, q, r)[0])


def match_and_prune(kp_i, kp_j, region=None, ratio=DEFAULT_RATIO, seed=0, config=None):
    """Ratio-match two keypoint sets and prune; returns surviving index pairs."""
    m = match_ratio(kp_i, kp_j, ratio, region)
    if len(m) < 4:
        return np.zeros(0, int), np.zeros(0, int)
    res = prune_pair(kp_i.pos[m.src_idx], kp_j.pos[m.dst_idx],
                     _pair_seed(seed, kp_i.frame_id, kp_j.frame_id), config)
    return m.src_idx[res.keep], m.dst_idx[res.keep]


def connect_stack(keypoint_sets, offsets, size, ratio=DEFAULT_RATIO, seed=0,
                  config=None, margin=None):
    """Match and prune every overlapping pair of frames into a :class:`LinkGraph`.

    ``keypoint_sets`` maps frame id to its keypoints (scales normalized) and
    ``offsets`` maps frame id to its initial translation.
    """
    ids = sorted(keypoint_sets)
    w, h = size
    margin = 0.1 * min(w, h) if margin is None else margin
    fa, fb, ka, kb, oa, ob, ss = [], [], [], [], [], [], []
    counts = {}
    for x, i in enumerate(ids):
        for j in ids[x + 1:]:
            reg = overlap_region(offsets[i], offsets[j], size)
            if reg is None:
                continue
            reg = (_grow(reg[0], margin), _grow(reg[1], margin))
            si, sj = match_and_prune(keypoint_sets[i], keypoint_sets[j], reg, ratio, seed, config)
            counts[(i, j)] = len(si)
            if len(si) == 0:
                log.info("pair %d-%d contributes no links", i, j)
                continue
            A, Bk = keypoint_sets[i], keypoint_sets[j]
            fa.append(np.full(len(si), i))
            fb.append(np.full(len(si), j))
            ka.append(si)
            kb.append(sj)
            oa.append(A.pos[si])
            ob.append(Bk.pos[sj])
            ss.append(np.minimum(A.norm_scale[si], Bk.norm_scale[sj]))
    if not fa:
        g = LinkGraph.empty()
        g.pair_counts = counts
        return g
    g = LinkGraph(np.concatenate(fa), np.concatenate(fb), np.concatenate(ka),
                  np.concatenate(kb), np.concatenate(oa), np.concatenate(ob),
                  np.concatenate(ss), pair_counts=counts)
    return g
