"""End-to-end compensation: keypoints in, gauge-normalized frame transforms out."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import compositor, geometry, kernels
from .congeal import FrameStack, SolverConfig, congeal_keyframes, select_keyframes
from .keypoints import DEFAULT_BUDGET, DetectorConfig, Frame, detect, normalize_scales
from .linkgraph import BACKWARD_FORWARD, PruneConfig, connect_stack, estimate_translations
from .nonkey import NonKeyConfig, align_nonkeyframes, keyframe_maps

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Every tunable of a run.  Defaults are the reference parameter set."""

    delta_f: int = 10
    scheme: str = BACKWARD_FORWARD
    gamma_coeff: float = 0.1
    T1: int = 300
    tau1: float = 5e-4
    T2: int = 50
    tau2: float = 1e-4
    r: float = 0.7
    tau: float = 1.0
    c: float = 20.0
    eta: float = 0.1
    max_halvings: int = 5
    min_links: int = 4
    linearize: str = "start"
    ratio: float = 0.8
    seed: int = 0
    ransac_threshold: float = 3.0
    ransac_confidence: float = 0.995
    ransac_max_iter: int = 2000
    tau_fg: float = compositor.DEFAULT_TAU_FG
    budget: int = DEFAULT_BUDGET
    canvas_cap: int = compositor.DEFAULT_CANVAS_CAP
    frames: str = ""
    keypoints: str = ""
    transforms: str = ""
    out: str = "out"
    emit_raw: bool = False
    render_mode: str = compositor.OVERLAY
    save_every: int = 1

    def __post_init__(self):
        if self.delta_f < 1:
            raise ValueError("delta_f must be >= 1")
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        # Sub-configs validate the rest.
        self.solver()
        self.nonkey()

    def solver(self):
        return SolverConfig(gamma_coeff=self.gamma_coeff, T1=self.T1, tau1=self.tau1, r=self.r,
                            scheme=self.scheme, max_halvings=self.max_halvings,
                            min_links=self.min_links, linearize=self.linearize)

    def nonkey(self):
        return NonKeyConfig(T2=self.T2, tau2=self.tau2, tau=self.tau, r=self.r, c=self.c,
                            eta=self.eta, gamma_coeff=self.gamma_coeff,
                            max_halvings=self.max_halvings, min_links=self.min_links,
                            linearize=self.linearize)

    def prune(self):
        return PruneConfig(threshold=self.ransac_threshold, confidence=self.ransac_confidence,
                           max_iter=self.ransac_max_iter)

    def to_json(self):
        return asdict(self)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}

    @classmethod
    def from_mapping(cls, values):
        """Build from string or typed values; unknown keys raise ValueError."""
        kinds = cls.field_types()
        typed = {}
        for key, val in values.items():
            name = key.replace("-", "_")
            if name not in kinds:
                raise ValueError(f"unknown configuration key {key!r}")
            typed[name] = coerce(val, kinds[name]) if isinstance(val, str) else val
        return cls(**typed)


def coerce(val, kind):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        v = val.strip().lower()
        if v not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {val!r}")
        return v in ("1", "true", "yes", "on")
    if kind == "int":
        return int(val)
    if kind == "float":
        return float(val)
    return val


def parse_config_text(text):
    """``key=value`` lines into a dict; '#' starts a comment."""
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"config line {n}: expected key=value, got {raw!r}")
        values[key.strip()] = val.strip()
    return values


@dataclass
class Compensation:
    homographies: list
    raw: list
    keyframes: list
    size: tuple
    report: dict = field(default_factory=dict)
    maps: dict = None


def detect_all(images, budget=DEFAULT_BUDGET, config=None):
    return [detect(Frame(t, img), budget, config) for t, img in enumerate(images)]


def compensate(keypoint_sets, size, config=None):
    """Align every frame of a sequence given its per-frame keypoints.

    ``keypoint_sets`` is ordered by frame number (``frame_id`` equal to the
    position).  Returns a :class:`Compensation` with gauge-normalized
    transforms and a report holding the resolved configuration.
    """
    cfg = config or RunConfig()
    t0 = time.perf_counter()
    sets = list(keypoint_sets)
    M = len(sets)
    if M == 0:
        raise ValueError("no frames")
    for t, s in enumerate(sets):
        if s.frame_id != t:
            raise ValueError(f"keypoint set at position {t} belongs to frame {s.frame_id}")
    report = {"config": cfg.to_json(), "frames": M, "size": list(size),
              "backend": kernels.BACKEND}
    if M == 1:
        report.update(keyframes=[0], gauge_flagged=False)
        return Compensation([np.eye(3)], [np.eye(3)], [0], tuple(size), report)

    if any(len(s) for s in sets):
        normalize_scales(sets)
    prune = cfg.prune()
    offsets, trans_diag = estimate_translations(sets, cfg.ratio, cfg.seed, prune)
    keys = select_keyframes(M, cfg.delta_f)
    graph = connect_stack({i: sets[i] for i in keys}, {i: offsets[i] for i in keys}, size,
                          cfg.ratio, cfg.seed, prune)
    stack = FrameStack(keys, graph, size, {i: geometry.translation(*offsets[i]) for i in keys},
                       cfg.scheme)
    key_H, align = congeal_keyframes(stack, cfg.solver())
    nk_cfg = cfg.nonkey()
    maps = keyframe_maps(graph, key_H, size, nk_cfg)
    raw, results = align_nonkeyframes(sets, keys, key_H, maps, offsets, size, nk_cfg,
                                      cfg.ratio, cfg.seed, prune)
    Hs, flagged = compositor.normalize_gauge(raw)
    report.update(
        keyframes=keys,
        translations=[[float(v) for v in o] for o in offsets],
        translation_diagnostics=trans_diag,
        keyframe_alignment=align.to_json(),
        nonkeyframes=[results[j].to_json() for j in sorted(results)],
        degraded=[j for j in sorted(results) if results[j].degraded],
        gauge_flagged=flagged,
    )
    report["seconds"] = round(time.perf_counter() - t0, 3)
    return Compensation(Hs, raw, keys, tuple(size), report, maps)


def compensate_frames(images, config=None, detector=None):
    """Detect keypoints on grayscale ``images`` and run :func:`compensate`."""
    cfg = config or RunConfig()
    images = [np.asarray(im, dtype=float) for im in images]
    if not images:
        raise ValueError("no frames")
    shape = images[0].shape
    for t, im in enumerate(images):
        if im.shape != shape:
            raise ValueError(f"frame {t} has size {im.shape[::-1]}, expected {shape[::-1]}")
    sets = detect_all(images, cfg.budget, detector or DetectorConfig())
    return compensate(sets, (shape[1], shape[0]), cfg)

