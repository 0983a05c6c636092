"""Joint alignment of keyframes by keypoint-based congealing.

Every keyframe carries a homography into the shared coordinate frame.  One
outer iteration visits the keyframes in ascending order and moves each one
by a regularized Gauss-Newton step that pulls the warped endpoints of its
links onto their partners; link weights are relaxed toward 1 as the
iteration count grows.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry
from .linkgraph import BACKWARD_FORWARD, LinkGraph, scheme_coefficients, schedule, view_weights

log = logging.getLogger(__name__)


class CongealError(RuntimeError):
    """The stack cannot be aligned (too many under-constrained frames)."""


@dataclass
class SolverConfig:
    gamma_coeff: float = 0.1
    T1: int = 300
    tau1: float = 5e-4
    r: float = 0.7
    scheme: str = BACKWARD_FORWARD
    mask: tuple = tuple(geometry.DEFAULT_MASK)
    max_halvings: int = 5
    min_links: int = 4
    linearize: str = "start"

    def __post_init__(self):
        if self.linearize not in geometry.LINEARIZATIONS:
            raise ValueError(f"linearize must be one of {geometry.LINEARIZATIONS}")
        if not 0 < self.r < 1:
            raise ValueError("r must lie in (0, 1)")
        if self.gamma_coeff <= 0 or self.T1 < 0 or self.tau1 <= 0:
            raise ValueError("gamma_coeff and tau1 must be positive, T1 non-negative")
        scheme_coefficients(self.scheme)

    def gamma(self, size):
        w, h = size
        return self.gamma_coeff * w * h


@dataclass
class AlignmentReport:
    iterations: int = 0
    objective: list = field(default_factory=list)
    objective_start: list = field(default_factory=list)
    mean_step: list = field(default_factory=list)
    frame_stats: dict = field(default_factory=dict)
    pair_counts: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    rejected: list = field(default_factory=list)

    def to_json(self):
        d = asdict(self)
        d["frame_stats"] = {str(k): v for k, v in sorted(self.frame_stats.items())}
        d["pair_counts"] = [{"a": int(a), "b": int(b), "links": int(n)}
                            for (a, b), n in sorted(self.pair_counts.items())]
        return d


def select_keyframes(M, delta_f):
    """Every ``delta_f``-th frame, plus the last one."""
    if M < 1 or delta_f < 1:
        raise ValueError("need M >= 1 and delta_f >= 1")
    ids = list(range(0, M, delta_f))
    if ids[-1] != M - 1:
        ids.append(M - 1)
    return ids


class FrameStack:
    """Keyframes under joint alignment: homographies plus the shared link graph."""

    def __init__(self, frame_ids, graph, size, homographies=None, scheme=BACKWARD_FORWARD):
        self.ids = sorted(int(i) for i in frame_ids)
        unknown = set(np.union1d(graph.frame_a, graph.frame_b).tolist()) - set(self.ids)
        if unknown:
            raise ValueError(f"graph references frames outside the stack: {sorted(unknown)}")
        self.graph = graph
        self.size = tuple(size)
        self.scheme = scheme
        self.q = 0
        self.H = {}
        for i in self.ids:
            H = np.eye(3) if homographies is None else homographies[i]
            self.H[i] = geometry.check_invertible(geometry.normalize(H))
        graph.refresh_all(self.H)

    def total_weights(self, idx, q, r):
        """Sum of both endpoint views' weights for links ``idx``."""
        alpha, beta = scheme_coefficients(self.scheme)
        s = self.graph.s[idx]
        return schedule(alpha * s, q, r) + schedule(beta * s, q, r)


def objective(stack, q=None, r=0.7):
    """Weighted squared endpoint disagreement summed over every frame's view."""
    g = stack.graph
    q = stack.q if q is None else q
    idx = np.nonzero(g.alive)[0]
    if len(idx) == 0:
        return 0.0
    d = g.warped_a[idx] - g.warped_b[idx]
    w = stack.total_weights(idx, q, r)
    return float(np.sum(w * (d[:, 0] ** 2 + d[:, 1] ** 2)))


def damped_step(H, orig, end, w_solve, w_check, gamma, mask, max_halvings=5,
                linearize="start"):
    """One regularized Gauss-Newton step for a single frame with step halving.

    ``orig`` are the frame's original keypoint coordinates, ``end`` the
    (fixed) partner coordinates.  The step solves with ``w_solve`` and is
    accepted only if it does not increase ``sum(w_check * |residual|^2)``;
    otherwise it is halved up to ``max_halvings`` times and then dropped.
    Returns ``(H_new, dp_applied, accepted)``.
    """
    start = geometry.warp_points(H, orig)
    res = geometry.WeightedResiduals(start, end, w_solve, linearize)
    dp = geometry.solve_update(res, gamma, mask)
    if not np.any(dp):
        return H, dp, True
    d0 = start - end
    before = float(np.sum(w_check * (d0[:, 0] ** 2 + d0[:, 1] ** 2)))
    t = 1.0
    for _ in range(max_halvings + 1):
        try:
            Hn = geometry.apply_increment(H, t * dp)
            d1 = geometry.warp_points(Hn, orig) - end
        except geometry.GeometryError:
            t *= 0.5
            continue
        after = float(np.sum(w_check * (d1[:, 0] ** 2 + d1[:, 1] ** 2)))
        if after <= before:
            return Hn, t * dp, True
        t *= 0.5
    return H, np.zeros(8), False


def frame_step(stack, i, config, q=None):
    """Update keyframe ``i`` against all other keyframes.

    Returns the applied increment, or None when the frame is under-constrained
    (fewer than ``config.min_links`` links with nonzero weight) and skipped.
    """
    g = stack.graph
    q = stack.q if q is None else q
    idx, start, end, other, s = g.view(i)
    w = view_weights(s, other, i, stack.scheme, q, config.r)
    if np.count_nonzero(w) < config.min_links:
        return None
    orig = np.where((g.frame_a[idx] == i)[:, None], g.orig_a[idx], g.orig_b[idx])
    w_check = stack.total_weights(idx, q, config.r)
    try:
        Hn, dp, ok = damped_step(stack.H[i], orig, end, w, w_check,
                                 config.gamma(stack.size), np.asarray(config.mask, float),
                                 config.max_halvings, config.linearize)
    except geometry.SingularSystemError:
        return None
    if not ok:
        log.debug("frame %d: step rejected at q=%d", i, q)
    stack.H[i] = Hn
    g.refresh(i, Hn)
    return dp if ok else np.zeros(8)


def _frame_stats(stack, config):
    stats = {}
    for i in stack.ids:
        idx, start, end, other, s = stack.graph.view(i)
        if len(idx) == 0:
            stats[i] = {"links": 0}
            continue
        e = np.abs(start - end).sum(axis=1)
        stats[i] = {"links": int(len(idx)), "mean_l1": float(e.mean()),
                    "max_l1": float(e.max())}
    return stats


def congeal_keyframes(stack, config=None):
    """Iterate frame steps until the mean squared increment falls below ``tau1``.

    Returns ``(homographies, report)``.
    """
    cfg = config or SolverConfig()
    report = AlignmentReport(pair_counts=dict(stack.graph.pair_counts))
    if len(stack.ids) < 2:
        report.frame_stats = _frame_stats(stack, cfg)
        return dict(stack.H), report

    under = []
    for i in stack.ids:
        idx, _, _, other, s = stack.graph.view(i)
        if np.count_nonzero(view_weights(s, other, i, stack.scheme, 0, cfg.r)) < cfg.min_links:
            under.append(i)
    if len(under) > 0.5 * len(stack.ids):
        raise CongealError(f"{len(under)} of {len(stack.ids)} keyframes are under-constrained: {under}")

    stack.q = 0
    while stack.q < cfg.T1:
        q = stack.q
        report.objective_start.append(objective(stack, q, cfg.r))
        sq = []
        for i in stack.ids:
            dp = frame_step(stack, i, cfg, q)
            if dp is None:
                report.skipped.append([q, i])
                sq.append(0.0)
                continue
            if not np.any(dp):
                report.rejected.append([q, i])
            sq.append(float(dp @ dp))
        report.objective.append(objective(stack, q, cfg.r))
        mean_sq = float(np.mean(sq))
        report.mean_step.append(mean_sq)
        stack.q += 1
        if mean_sq <= cfg.tau1:
            break
    report.iterations = stack.q
    report.frame_stats = _frame_stats(stack, cfg)
    return dict(stack.H), report
