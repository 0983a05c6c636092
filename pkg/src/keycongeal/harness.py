"""Synthetic scenes with ground truth, and gauge-free error metrics.

A scene is a procedurally textured "world" raster viewed by a moving camera.
Each frame has a ground-truth homography mapping frame pixels to world
pixels.  Besides rendered frames, a scene carries injected keypoints with
exact correspondences (optionally noisy), phantom outlier tracks and
keypoints riding on moving foreground rectangles, all labeled.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage
from shapely.geometry import Polygon

from . import geometry, kernels
from .keypoints import DEFAULT_RATIO, DESCRIPTOR_SIZE, KeypointSet, match_ratio
from .linkgraph import PruneConfig, _pair_seed, mean_motion, ransac_homography

TRAJECTORIES = ("static", "translation", "similarity", "homography", "pan_return")

INLIER, OUTLIER, FOREGROUND = "inlier", "outlier", "foreground"
# Keypoint scale levels and their mix, as the pyramid detector finds them on harness textures.
SCALE_LEVELS = (1.5, 3.0, 6.0)
SCALE_MIX = (0.67, 0.28, 0.05)


@dataclass
class SceneSpec:
    trajectory: str = "translation"
    M: int = 20
    w: int = 320
    h: int = 240
    noise_sigma: float = 0.0
    outlier_frac: float = 0.0
    seed: int = 0
    n_points: int = 300
    step: float = 4.0
    amplitude: float = 0.0
    rotation: float = 0.0
    zoom: float = 0.05
    perspective: float = 2e-4
    fg_count: int = 0
    fg_size: float = 60.0
    fg_speed: float = 1.0
    fg_value: float = 1.0
    fg_heading: str = "random"
    fg_spread: bool = False
    fg_grid: float = 0.0
    render: bool = True

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if not 0 <= self.outlier_frac < 1:
            raise ValueError("outlier_frac must lie in [0, 1)")
        if self.M < 1 or self.w < 16 or self.h < 16:
            raise ValueError("scene needs M >= 1 and frames of at least 16x16")
        if self.fg_heading != "random":
            float(self.fg_heading)

    @classmethod
    def from_text(cls, text):
        """Parse ``key=value`` lines ('#' starts a comment)."""
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in kinds:
                raise ValueError(f"unknown scene key {key!r}")
            values[key] = _coerce(val, kinds[key])
        return cls(**values)

    def to_text(self):
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())


def _coerce(val, kind):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        return val.lower() in ("1", "true", "yes", "on")
    if kind == "int":
        return int(val)
    if kind == "float":
        return float(val)
    return val


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class Scene:
    spec: SceneSpec
    source: np.ndarray
    gt: list
    keypoints: list
    frames: list = None
    fg_masks: list = None
    fg_rects: list = field(default_factory=list)

    @property
    def size(self):
        return (self.spec.w, self.spec.h)


def _about_center(spec, t):
    """Raw (pre world shift) frame-to-world homography for frame ``t``."""
    w, h, M = spec.w, spec.h, spec.M
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    phase = 2 * np.pi * t / max(M - 1, 1)
    kind = spec.trajectory
    if kind == "static":
        return np.eye(3)
    if kind == "translation":
        return geometry.translation(spec.step * t, 0.4 * spec.step * t)
    if kind == "pan_return":
        amp = spec.amplitude or 1.2 * w
        return geometry.translation(amp * (1 - np.cos(phase)) / 2, 0.25 * amp * np.sin(phase))
    theta = np.deg2rad(spec.rotation or 5.0) * np.sin(phase)
    scale = 1.0 + spec.zoom * np.sin(0.5 * phase)
    ct, st = np.cos(theta) * scale, np.sin(theta) * scale
    A = np.array([[ct, -st, 0], [st, ct, 0], [0, 0, 1.0]])
    if kind == "homography":
        P = np.eye(3)
        P[2, 0] = spec.perspective * np.sin(phase)
        P[2, 1] = spec.perspective * np.cos(1.3 * phase) - spec.perspective
        A = A @ P
    pos = c + np.array([spec.step * t, 0.3 * spec.step * t])
    return geometry.normalize(geometry.translation(*pos) @ A @ geometry.translation(-c[0], -c[1]))


def corners(size):
    w, h = size
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=float)


def _texture(rng, shape):
    h, w = shape
    tex = np.zeros(shape)
    for cell in (3, 6, 12, 24, 48):
        layer = ndimage.gaussian_filter(rng.standard_normal(shape), cell / 2.0, mode="wrap")
        tex += layer / (layer.std() + 1e-12) * (cell / 48.0) ** 0.3
    n_shapes = int(w * h / 2500)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_shapes):
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        sx, sy = rng.uniform(4, 20, size=2)
        val = rng.normal(0, 1.5)
        if rng.random() < 0.5:
            m = (np.abs(xx - x0) < sx) & (np.abs(yy - y0) < sy)
        else:
            m = ((xx - x0) / sx) ** 2 + ((yy - y0) / sy) ** 2 < 1
        tex[m] = val
    lo, hi = np.percentile(tex, [1, 99])
    return 0.05 + 0.55 * np.clip((tex - lo) / (hi - lo), 0, 1)


def _unit_descriptors(rng, n):
    d = rng.standard_normal((n, DESCRIPTOR_SIZE))
    d -= d.mean(axis=1, keepdims=True)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _noise(rng, n, sigma):
    if sigma <= 0:
        return np.zeros((n, 2))
    z = rng.standard_normal((n, 2)) * sigma
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    # Truncate so every inlier lies within 3 sigma of its true position.
    return np.where(norm > 3 * sigma, z * (3 * sigma / np.maximum(norm, 1e-12)), z)


def generate_scene(spec):
    """Render frames and inject labeled keypoints for ``spec`` (deterministic in the seed)."""
    rng = np.random.default_rng(spec.seed)
    w, h, M = spec.w, spec.h, spec.M
    raw = [_about_center(spec, t) for t in range(M)]
    pts = np.vstack([geometry.warp_points(H, corners((w, h))) for H in raw])
    margin = 12.0
    shift = margin - np.floor(pts.min(axis=0))
    gt = [geometry.normalize(geometry.translation(*shift) @ H) for H in raw]
    world_w = int(np.ceil(pts[:, 0].max() + shift[0] + margin))
    world_h = int(np.ceil(pts[:, 1].max() + shift[1] + margin))
    source = _texture(rng, (world_h, world_w))
    for H in gt:
        c = geometry.warp_points(H, corners((w, h)))
        if c.min() < 0 or c[:, 0].max() > world_w - 1 or c[:, 1].max() > world_h - 1:
            raise ValueError("frame footprint escapes the source raster")

    # Foreground rectangles move linearly in world coordinates, starting near
    # the first frame's center or (fg_spread) anywhere along the camera path.
    rects = []
    c0 = geometry.warp_points(gt[0], [[(w - 1) / 2, (h - 1) / 2]])[0]
    path_lo = pts.min(axis=0) + shift
    path_hi = pts.max(axis=0) + shift - spec.fg_size
    if spec.fg_grid > 0:
        # A lattice of patches covering the camera path, all sharing one heading.
        xs = np.arange(path_lo[0], path_hi[0] + spec.fg_size, spec.fg_grid)
        ys = np.arange(path_lo[1], path_hi[1] + spec.fg_size, spec.fg_grid)
        starts = [np.array([x, y]) for y in ys for x in xs]
    else:
        starts = []
        for _ in range(spec.fg_count):
            if spec.fg_spread:
                starts.append(rng.uniform(path_lo, np.maximum(path_hi, path_lo)))
            else:
                starts.append(c0 + rng.uniform(-0.25, 0.25, 2) * [w, h] - spec.fg_size / 2)
    for start in starts:
        ang = rng.uniform(0, 2 * np.pi)
        if spec.fg_heading != "random":
            ang = np.deg2rad(float(spec.fg_heading))
        vel = spec.fg_speed * np.array([np.cos(ang), np.sin(ang)])
        rects.append((start, vel))
    n_rects = len(rects)

    def rect_at(k, t):
        start, vel = rects[k]
        p = start + vel * t
        return p[0], p[1], p[0] + spec.fg_size, p[1] + spec.fg_size

    density = spec.n_points / float(w * h)
    n_world = int(round(density * world_w * world_h))
    wpts = rng.uniform([0, 0], [world_w, world_h], (n_world, 2))
    wdesc = _unit_descriptors(rng, n_world)
    levels = np.array(SCALE_LEVELS)
    wscale = levels[rng.choice(3, n_world, p=SCALE_MIX)]
    n_fg = int(round(density * spec.fg_size ** 2)) if n_rects else 0
    fg_local = rng.uniform(0, spec.fg_size, (n_rects, n_fg, 2))
    fg_desc = _unit_descriptors(rng, n_rects * n_fg).reshape(n_rects, n_fg, DESCRIPTOR_SIZE)
    fg_scale = levels[rng.choice(3, (n_rects, n_fg), p=SCALE_MIX)]
    ratio = spec.outlier_frac / (1.0 - spec.outlier_frac)
    pool = int(np.ceil(ratio * spec.n_points * 1.5)) + 1
    ph_desc = _unit_descriptors(rng, pool)
    ph_ref = rng.uniform([0, 0], [world_w, world_h], (pool, 2))
    ph_scale = levels[rng.choice(3, pool, p=SCALE_MIX)]

    keypoints, frames, masks = [], [], []
    fg_rects = []
    lo, hi = 2.0, np.array([w - 3.0, h - 3.0])
    for t in range(M):
        Hinv = geometry.invert(gt[t])
        cur = [rect_at(k, t) for k in range(n_rects)]
        fg_rects.append([list(map(float, r)) for r in cur])
        loc = geometry.warp_points(Hinv, wpts)
        vis = np.all((loc >= lo) & (loc <= hi), axis=1)
        for (x0, y0, x1, y1) in cur:
            vis &= ~((wpts[:, 0] >= x0) & (wpts[:, 0] <= x1) & (wpts[:, 1] >= y0) & (wpts[:, 1] <= y1))
        vi = np.nonzero(vis)[0]
        P = [loc[vi] + _noise(rng, len(vi), spec.noise_sigma)]
        D = [wdesc[vi]]
        S = [wscale[vi]]
        L = [np.full(len(vi), INLIER, dtype=object)]
        T = [vi.astype(int)]
        for k, (x0, y0, _, _) in enumerate(cur):
            fl = geometry.warp_points(Hinv, fg_local[k] + [x0, y0])
            fv = np.nonzero(np.all((fl >= lo) & (fl <= hi), axis=1))[0]
            P.append(fl[fv] + _noise(rng, len(fv), spec.noise_sigma))
            D.append(fg_desc[k][fv])
            S.append(fg_scale[k][fv])
            L.append(np.full(len(fv), FOREGROUND, dtype=object))
            T.append(n_world + k * n_fg + fv)
        n_out = min(int(round(ratio * sum(len(p) for p in P))), pool)
        if n_out:
            ref = geometry.warp_points(Hinv, ph_ref[:n_out])
            pos = rng.uniform([lo, lo], hi, (n_out, 2))
            for _ in range(100):
                near = np.linalg.norm(pos - ref, axis=1) < 5.0
                if not near.any():
                    break
                pos[near] = rng.uniform([lo, lo], hi, (int(near.sum()), 2))
            P.append(pos)
            D.append(ph_desc[:n_out])
            S.append(ph_scale[:n_out])
            L.append(np.full(n_out, OUTLIER, dtype=object))
            T.append(n_world + n_rects * n_fg + np.arange(n_out))
        P, D, S = np.vstack(P), np.vstack(D), np.concatenate(S)
        L, T = np.concatenate(L), np.concatenate(T)
        D = D + 0.02 * rng.standard_normal(D.shape)
        D /= np.linalg.norm(D, axis=1, keepdims=True)
        order = rng.permutation(len(P))
        resp = rng.uniform(0.1, 1.0, len(P))
        keypoints.append(KeypointSet(t, P[order], S[order], resp[order], D[order],
                                     extra={"track": T[order], "label": L[order].astype(str)}))
        if spec.render:
            img, m = _render(source, gt[t], (w, h), cur, spec.fg_value)
            frames.append(img)
            masks.append(m)
    return Scene(spec, source, gt, keypoints, frames if spec.render else None,
                 masks if spec.render else None, fg_rects)


def _render(source, H, size, rects, fg_value):
    w, h = size
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    pts = geometry.warp_points(H, np.stack([xx.ravel(), yy.ravel()], axis=1))
    vals, _ = kernels.bilinear_sample(source, pts[:, 0], pts[:, 1])
    img = vals.reshape(h, w)
    mask = np.zeros((h, w), dtype=bool)
    for (x0, y0, x1, y1) in rects:
        inside = ((pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1))
        mask |= inside.reshape(h, w)
    img = np.where(mask, fg_value, img)
    return np.clip(img, 0.0, 1.0), mask


def relative_corner_error(recovered, gt, i, j, size):
    """Mean corner displacement (px) between recovered and true frame-i-to-frame-j maps."""
    rel_rec = geometry.compose(geometry.invert(recovered[j]), recovered[i])
    rel_gt = geometry.compose(geometry.invert(gt[j]), gt[i])
    c = corners(size)
    d = geometry.warp_points(rel_rec, c) - geometry.warp_points(rel_gt, c)
    return float(np.mean(np.linalg.norm(d, axis=1)))


def footprint(H, size):
    return Polygon(geometry.warp_points(H, corners(size)))


def overlapping(gt, i, j, size):
    return footprint(gt[i], size).intersection(footprint(gt[j], size)).area > 0


def evaluation_frames(M):
    """0-based version of the frame set {1, M/4, M/2, 3M/4, M}."""
    return sorted({int(round(f * (M - 1))) for f in (0.0, 0.25, 0.5, 0.75, 1.0)})


@dataclass
class EvalResult:
    pairs: list
    by_gap: dict
    mean_corner_error: float
    max_corner_error: float
    mean_bre: float = None

    def to_json(self):
        return {"pairs": self.pairs,
                "by_gap": {str(k): v for k, v in sorted(self.by_gap.items())},
                "mean_corner_error": self.mean_corner_error,
                "max_corner_error": self.max_corner_error,
                "mean_bre": self.mean_bre}

    def table(self):
        lines = ["gap  pairs  corner_err_px  bre"]
        for gap, v in sorted(self.by_gap.items()):
            bre = "-" if v["bre"] is None else f"{v['bre']:.4f}"
            lines.append(f"{gap:>3}  {v['pairs']:>5}  {v['corner_error']:>13.4f}  {bre}")
        return "\n".join(lines) + "\n"


def error_vs_timegap(recovered, gt, size, frame_set=None, frames=None, fg_masks=None):
    """Corner error (and BRE when frames are given) for every overlapping pair in ``frame_set``.

    ``fg_masks`` are frame-local foreground masks excluded from the BRE.
    """
    from .compositor import bre

    M = len(gt)
    fset = evaluation_frames(M) if frame_set is None else list(frame_set)
    pairs = []
    for x, i in enumerate(fset):
        for j in fset[x + 1:]:
            if not overlapping(gt, i, j, size):
                continue
            item = {"i": i, "j": j, "gap": j - i,
                    "corner_error": relative_corner_error(recovered, gt, i, j, size)}
            if frames is not None:
                masks = None if fg_masks is None else (~fg_masks[i], ~fg_masks[j])
                try:
                    item["bre"] = bre(frames[i], frames[j], recovered[i], recovered[j], masks)
                except ValueError:
                    item["bre"] = None
            pairs.append(item)
    by_gap = {}
    for p in pairs:
        by_gap.setdefault(p["gap"], []).append(p)
    summary = {}
    for gap, ps in by_gap.items():
        b = [p["bre"] for p in ps if p.get("bre") is not None]
        summary[gap] = {"pairs": len(ps),
                        "corner_error": float(np.mean([p["corner_error"] for p in ps])),
                        "bre": float(np.mean(b)) if b else None}
    ce = [p["corner_error"] for p in pairs]
    b = [p["bre"] for p in pairs if p.get("bre") is not None]
    return EvalResult(pairs, summary, float(np.mean(ce)) if ce else 0.0,
                      float(np.max(ce)) if ce else 0.0, float(np.mean(b)) if b else None)


def sequential_baseline(keypoint_sets, ratio=DEFAULT_RATIO, seed=0, config=None):
    """Chained consecutive-pair RANSAC homographies (drift-prone comparison)."""
    cfg = config or PruneConfig()
    Hs = [np.eye(3)]
    for a, b in zip(keypoint_sets[:-1], keypoint_sets[1:]):
        m = match_ratio(b, a, ratio)
        H = None
        if len(m) >= 4:
            rng = _pair_seed(seed, b.frame_id, a.frame_id)
            H, _ = ransac_homography(b.pos[m.src_idx], a.pos[m.dst_idx], rng, cfg)
        if H is None:
            t = mean_motion(a.pos[m.dst_idx], b.pos[m.src_idx]) if len(m) else None
            H = geometry.translation(*(-t if t is not None else np.zeros(2)))
        Hs.append(geometry.compose(Hs[-1], H))
    return Hs


def save_scene(scene, out_dir):
    """Write frames, keypoints, ground truth and labels under ``out_dir``."""
    from . import imageio
    from .keypoints import save_keypoints

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "scene.txt"), "w", encoding="utf-8") as fh:
        fh.write(scene.spec.to_text())
    if scene.frames is not None:
        fdir = os.path.join(out_dir, "frames")
        mdir = os.path.join(out_dir, "masks")
        os.makedirs(fdir, exist_ok=True)
        os.makedirs(mdir, exist_ok=True)
        for t, (img, m) in enumerate(zip(scene.frames, scene.fg_masks)):
            imageio.write_image(os.path.join(fdir, f"frame_{t:04d}.png"), img)
            imageio.write_image(os.path.join(mdir, f"mask_{t:04d}.png"), m.astype(float))
    save_keypoints(os.path.join(out_dir, "keypoints.json"), scene.keypoints,
                   width=scene.spec.w, height=scene.spec.h)
    write_transforms(os.path.join(out_dir, "gt.json"), scene.gt)
    labels = {"foreground": [{"frame": t, "rects": r} for t, r in enumerate(scene.fg_rects)]}
    with open(os.path.join(out_dir, "labels.json"), "w", encoding="utf-8") as fh:
        json.dump(labels, fh, indent=1, sort_keys=True)


def write_transforms(path, homographies, keyframes=None, extra=None):
    keyframes = set(keyframes or [])
    items = []
    for t, H in enumerate(homographies):
        item = {"frame": t, "H": [float(v) for v in geometry.normalize(H).ravel()]}
        if keyframes:
            item["keyframe"] = t in keyframes
        items.append(item)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(items if extra is None else {**extra, "transforms": items}, fh,
                  indent=1, sort_keys=True)
        fh.write("\n")


def read_transforms(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    items = data["transforms"] if isinstance(data, dict) else data
    items = sorted(items, key=lambda it: it["frame"])
    return [np.array(it["H"], dtype=float).reshape(3, 3) for it in items], items
