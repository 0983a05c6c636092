"""Reliability maps on converged keyframes and alignment of the frames between them.

Each keyframe gets a map that is high where its links ended up well aligned
(likely background).  A non-keyframe is then aligned on its own against its
two encompassing keyframes, which stay frozen; its link weights come from the
keyframes' maps and relax toward 1 with the iteration count.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import geometry, kernels
from .congeal import damped_step
from .keypoints import DEFAULT_RATIO
from .linkgraph import _grow, match_and_prune, overlap_region

log = logging.getLogger(__name__)


@dataclass
class NonKeyConfig:
    T2: int = 50
    tau2: float = 1e-4
    tau: float = 1.0
    r: float = 0.7
    c: float = 20.0
    eta: float = 0.1
    gamma_coeff: float = 0.1
    mask: tuple = tuple(geometry.DEFAULT_MASK)
    max_halvings: int = 5
    min_links: int = 4
    linearize: str = "start"

    def __post_init__(self):
        if not 0 < self.r < 1:
            raise ValueError("r must lie in (0, 1)")
        if self.linearize not in geometry.LINEARIZATIONS:
            raise ValueError(f"linearize must be one of {geometry.LINEARIZATIONS}")
        if min(self.tau2, self.tau, self.c, self.eta, self.gamma_coeff) <= 0 or self.T2 < 0:
            raise ValueError("NonKeyConfig parameters must be positive")
        if self.eta > 1:
            raise ValueError("eta must not exceed 1")


def link_error(start, end):
    """L1 distance between warped link endpoints (vectorized over rows)."""
    d = np.abs(np.asarray(start, float) - np.asarray(end, float))
    return d.sum(axis=-1)


class ReliabilityMap:
    """Frame-local raster of background likelihood, clamped to ``[eta, 1]``."""

    def __init__(self, frame_id, grid, eta=0.1):
        self.frame_id = int(frame_id)
        self.grid = np.asarray(grid, dtype=float)
        self.eta = float(eta)

    @property
    def size(self):
        return self.grid.shape[1], self.grid.shape[0]

    def at(self, xs, ys):
        """Bilinear lookup at frame-local coordinates (clamped at the border)."""
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        w, h = self.size
        vals, _ = kernels.bilinear_sample(self.grid, np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1))
        return vals

    def to_uint8(self):
        return np.round(255.0 * self.grid).astype(np.uint8)


def reliability_map(frame_id, pos, scales, errors, size, config=None):
    """Sum of Gaussians at the well-aligned links' original coordinates.

    ``pos`` are the keyframe-side original coordinates of its links,
    ``scales`` their normalized scales and ``errors`` their L1 link errors.
    Only links with error below ``config.tau`` contribute.
    """
    cfg = config or NonKeyConfig()
    w, h = size
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    good = np.asarray(errors, dtype=float) < cfg.tau
    if np.any(good):
        sig = cfg.c * np.asarray(scales, dtype=float)[good]
        acc = kernels.splat_gaussians(w, h, pos[good, 0], pos[good, 1], sig)
    else:
        acc = np.zeros((h, w))
    grid = np.maximum(np.minimum(acc, 1.0), cfg.eta)
    return ReliabilityMap(frame_id, grid, cfg.eta)


def keyframe_maps(graph, homographies, size, config=None):
    """Reliability map for every keyframe from the converged link graph."""
    cfg = config or NonKeyConfig()
    graph.refresh_all(homographies)
    maps = {}
    for i in sorted(homographies):
        idx, start, end, _, _ = graph.view(i)
        on_a = graph.frame_a[idx] == i
        orig = np.where(on_a[:, None], graph.orig_a[idx], graph.orig_b[idx])
        # Scale of this keyframe's own keypoint is not stored per side; the
        # link scale (min of both ends) is the conservative choice.
        maps[i] = reliability_map(i, orig, graph.s[idx], link_error(start, end), size, cfg)
    return maps


@dataclass
class NonKeyResult:
    frame_id: int
    H: np.ndarray
    degraded: bool
    links: int
    iterations: int
    rejected: int = 0

    def to_json(self):
        return {"frame": self.frame_id, "degraded": self.degraded, "links": self.links,
                "iterations": self.iterations, "rejected_steps": self.rejected}


def interpolate_fallback(j, left, right, H_left, H_right):
    """Translations interpolated between the keyframes, the rest from the nearer one."""
    t = (j - left) / float(right - left)
    H = np.array(H_left if t <= 0.5 else H_right, dtype=float)
    H[0, 2] = (1 - t) * H_left[0, 2] + t * H_right[0, 2]
    H[1, 2] = (1 - t) * H_left[1, 2] + t * H_right[1, 2]
    return geometry.normalize(H)


def nonkey_links(kp_j, keyframes, offsets, size, ratio=DEFAULT_RATIO, seed=0,
                 prune_config=None, margin=None):
    """Match frame j against each keyframe ``(id, keypoints, H, map)`` and collect links.

    Returns ``(orig_j, end, base)``: j's original coordinates, the keyframe
    endpoints warped into the shared frame, and the map values at the
    keyframe keypoints.
    """
    w, h = size
    margin = 0.1 * min(w, h) if margin is None else margin
    origs, ends, bases = [np.zeros((0, 2))], [np.zeros((0, 2))], [np.zeros(0)]
    for a, kp_a, H_a, rmap in keyframes:
        reg = overlap_region(offsets[kp_j.frame_id], offsets[a], size)
        if reg is None:
            continue
        reg = (_grow(reg[0], margin), _grow(reg[1], margin))
        sj, sa = match_and_prune(kp_j, kp_a, reg, ratio, seed, prune_config)
        if len(sj) == 0:
            continue
        pa = kp_a.pos[sa]
        origs.append(kp_j.pos[sj])
        ends.append(geometry.warp_points(H_a, pa))
        bases.append(rmap.at(pa[:, 0], pa[:, 1]))
    return np.vstack(origs), np.vstack(ends), np.concatenate(bases)


def align_nonkeyframe(kp_j, left, right, offsets, size, config=None, ratio=DEFAULT_RATIO,
                      seed=0, prune_config=None):
    """Align one non-keyframe against its two frozen encompassing keyframes.

    ``left`` and ``right`` are ``(id, keypoints, H, ReliabilityMap)`` tuples.
    Returns a :class:`NonKeyResult`.
    """
    cfg = config or NonKeyConfig()
    j = kp_j.frame_id
    (kl, _, Hl, _), (kr, _, Hr, _) = left, right
    if not kl < j < kr:
        raise ValueError(f"frame {j} is not strictly between keyframes {kl} and {kr}")
    orig, end, base = nonkey_links(kp_j, [left, right], offsets, size, ratio, seed, prune_config)
    if len(orig) < cfg.min_links:
        log.warning("frame %d: %d links, using interpolated fallback", j, len(orig))
        return NonKeyResult(j, interpolate_fallback(j, kl, kr, Hl, Hr), True, len(orig), 0)

    near, Hn = (kl, Hl) if j - kl <= kr - j else (kr, Hr)
    H = geometry.compose(Hn, geometry.translation(*(np.asarray(offsets[j]) - offsets[near])))
    gamma = cfg.gamma_coeff * size[0] * size[1]
    mask = np.asarray(cfg.mask, dtype=float)
    q, rejected = 0, 0
    while q < cfg.T2:
        w = base ** (cfg.r ** q)
        try:
            H, dp, ok = damped_step(H, orig, end, w, w, gamma, mask, cfg.max_halvings,
                                        cfg.linearize)
        except geometry.SingularSystemError:
            break
        rejected += not ok
        q += 1
        if ok and float(dp @ dp) <= cfg.tau2:
            break
    return NonKeyResult(j, H, False, len(orig), q, rejected)


def align_nonkeyframes(keypoint_sets, keyframes, key_H, maps, offsets, size, config=None,
                       ratio=DEFAULT_RATIO, seed=0, prune_config=None):
    """Align every frame that is not a keyframe; keyframe transforms pass through untouched.

    Returns ``(homographies list, results dict)``.
    """
    keys = sorted(keyframes)
    out = [None] * len(keypoint_sets)
    results = {}
    for k in keys:
        out[k] = key_H[k]
    for kl, kr in zip(keys[:-1], keys[1:]):
        left = (kl, keypoint_sets[kl], key_H[kl], maps[kl])
        right = (kr, keypoint_sets[kr], key_H[kr], maps[kr])
        for j in range(kl + 1, kr):
            res = align_nonkeyframe(keypoint_sets[j], left, right, offsets, size, config,
                                    ratio, seed, prune_config)
            out[j] = res.H
            results[j] = res
    return out, results
