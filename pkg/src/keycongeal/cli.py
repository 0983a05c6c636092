"""Command-line entry point: compensate, render, background, segment, evaluate, synth.

Every subcommand accepts ``--config FILE`` (``key=value`` lines) and one
``--<key>`` override per configuration field; overrides win over the file.
Failures print a JSON diagnostic on stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import compositor, harness, imageio, pipeline
from .congeal import CongealError
from .geometry import GeometryError
from .keypoints import load_keypoints

log = logging.getLogger("keycongeal")


class MissingInputError(FileNotFoundError):
    pass


def _dump(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _require(path, what):
    if not path or not os.path.exists(path):
        raise MissingInputError(f"{what} not found: expected {path or '<unset>'}")
    return path


def resolve_config(args):
    values = {}
    if args.config:
        with open(_require(args.config, "config file"), encoding="utf-8") as fh:
            values.update(pipeline.parse_config_text(fh.read()))
    for name in pipeline.RunConfig.field_types():
        v = getattr(args, "opt_" + name, None)
        if v is not None:
            values[name] = v
    return pipeline.RunConfig.from_mapping(values)


def _frames(cfg):
    frames, paths = imageio.read_frames(_require(cfg.frames, "frame directory"))
    if not frames:
        raise MissingInputError(f"no frames in {cfg.frames}")
    return frames, paths


def _transforms(cfg):
    path = cfg.transforms or os.path.join(cfg.out, "transforms.json")
    Hs, _ = harness.read_transforms(_require(path, "transforms file"))
    return Hs


def _maps_dir(cfg):
    return os.path.join(cfg.out, "maps")


def _load_maps(cfg, Hs, shape):
    """Reliability maps for the keyframes listed in the compensation report."""
    report = os.path.join(cfg.out, "report.json")
    with open(_require(report, "compensation report"), encoding="utf-8") as fh:
        keys = json.load(fh)["keyframes"]
    maps = {}
    for k in keys:
        p = _require(os.path.join(_maps_dir(cfg), f"map_{k:04d}.png"), "reliability map")
        grid = imageio.read_image(p)
        if grid.shape != shape:
            raise ValueError(f"reliability map {p} does not match the frame size")
        maps[k] = np.maximum(grid, cfg.eta)
    return maps


def _plate(cfg, frames, Hs):
    maps = _load_maps(cfg, Hs, frames[0].shape)
    keys = sorted(maps)
    canvas = compositor.canvas_bounds(frames[0].shape[::-1], Hs, cfg.canvas_cap)
    return compositor.reconstruct_background([frames[k] for k in keys], [maps[k] for k in keys],
                                             [Hs[k] for k in keys], canvas)


def cmd_compensate(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    if cfg.keypoints:
        sets, data = load_keypoints(_require(cfg.keypoints, "keypoint file"))
        meta = data[0] if data else {}
        if cfg.frames:
            h, w = imageio.read_image(imageio.list_frames(cfg.frames)[0]).shape
        elif "width" in meta and "height" in meta:
            w, h = int(meta["width"]), int(meta["height"])
        else:
            raise ValueError("injection mode needs width/height in the keypoint file or --frames")
        comp = pipeline.compensate(sets, (w, h), cfg)
    else:
        frames, _ = _frames(cfg)
        comp = pipeline.compensate_frames(frames, cfg)
    harness.write_transforms(os.path.join(cfg.out, "transforms.json"), comp.homographies,
                             comp.keyframes)
    if cfg.emit_raw:
        harness.write_transforms(os.path.join(cfg.out, "transforms_raw.json"), comp.raw,
                                 comp.keyframes)
    if comp.maps:
        os.makedirs(_maps_dir(cfg), exist_ok=True)
        for k, m in sorted(comp.maps.items()):
            imageio.write_image(os.path.join(_maps_dir(cfg), f"map_{k:04d}.png"), m.grid)
    _dump(os.path.join(cfg.out, "report.json"), comp.report)
    return 0


def cmd_render(cfg):
    frames, _ = _frames(cfg)
    Hs = _transforms(cfg)
    if len(Hs) != len(frames):
        raise ValueError(f"{len(Hs)} transforms for {len(frames)} frames")
    plate = _plate(cfg, frames, Hs) if cfg.render_mode == compositor.OVER_BACKGROUND else None
    canvas = plate.canvas if plate else compositor.canvas_bounds(
        frames[0].shape[::-1], Hs, cfg.canvas_cap)
    pdir = os.path.join(cfg.out, "panorama")
    os.makedirs(pdir, exist_ok=True)
    img = None
    for t, img, _ in compositor.iter_panorama(frames, Hs, cfg.render_mode, plate, canvas):
        if t % cfg.save_every == 0 or t == len(frames) - 1:
            imageio.write_image(os.path.join(pdir, f"pano_{t:04d}.png"), img)
    imageio.write_image(os.path.join(cfg.out, "mosaic.png"), img)
    _dump(os.path.join(cfg.out, "canvas.json"), canvas.to_json())
    return 0


def cmd_background(cfg):
    frames, _ = _frames(cfg)
    Hs = _transforms(cfg)
    plate = _plate(cfg, frames, Hs)
    os.makedirs(cfg.out, exist_ok=True)
    imageio.write_image(os.path.join(cfg.out, "background.png"), plate.image)
    imageio.write_image(os.path.join(cfg.out, "background_valid.png"), plate.valid.astype(float))
    _dump(os.path.join(cfg.out, "background.json"), plate.canvas.to_json())
    return 0


def cmd_segment(cfg):
    frames, _ = _frames(cfg)
    Hs = _transforms(cfg)
    plate = _plate(cfg, frames, Hs)
    sdir = os.path.join(cfg.out, "segment")
    os.makedirs(sdir, exist_ok=True)
    fractions = []
    for t, (img, H) in enumerate(zip(frames, Hs)):
        mask = compositor.segment_foreground(img, H, plate, cfg.tau_fg)
        imageio.write_image(os.path.join(sdir, f"mask_{t:04d}.png"), mask.astype(float))
        fractions.append(float(mask.mean()))
    _dump(os.path.join(cfg.out, "segment.json"), {"tau_fg": cfg.tau_fg, "fraction": fractions})
    return 0


def cmd_evaluate(cfg, gt_path, size=None, masks_dir=None):
    Hs = _transforms(cfg)
    gt, _ = harness.read_transforms(_require(gt_path, "ground-truth transforms"))
    if len(gt) != len(Hs):
        raise ValueError(f"{len(Hs)} transforms but {len(gt)} ground-truth entries")
    frames = fg = None
    if cfg.frames:
        frames, _ = _frames(cfg)
        size = frames[0].shape[::-1]
    if size is None:
        raise ValueError("evaluate needs --frames or --size WxH")
    if masks_dir:
        paths = imageio.list_frames(_require(masks_dir, "mask directory"))
        fg = [imageio.read_image(p) > 0.5 for p in paths]
    res = harness.error_vs_timegap(Hs, gt, tuple(size), frames=frames, fg_masks=fg)
    os.makedirs(cfg.out, exist_ok=True)
    _dump(os.path.join(cfg.out, "eval.json"), res.to_json())
    table = res.table()
    with open(os.path.join(cfg.out, "eval.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    sys.stdout.write(table)
    return 0


def cmd_synth(cfg, scene_path, overrides=()):
    text = ""
    if scene_path:
        with open(_require(scene_path, "scene spec"), encoding="utf-8") as fh:
            text = fh.read()
    text += "".join(f"{o}\n" for o in overrides)
    spec = harness.SceneSpec.from_text(text)
    scene = harness.generate_scene(spec)
    harness.save_scene(scene, cfg.out)
    return 0


def _size(text):
    w, sep, h = text.lower().partition("x")
    if not sep:
        raise argparse.ArgumentTypeError("size must look like 320x240")
    return int(w), int(h)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    for name in pipeline.RunConfig.field_types():
        common.add_argument("--" + name.replace("_", "-"), dest="opt_" + name, default=None,
                            metavar="VALUE")

    p = argparse.ArgumentParser(prog="keycongeal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("compensate", parents=[common], help="align all frames")
    sub.add_parser("render", parents=[common], help="motion panorama")
    sub.add_parser("background", parents=[common], help="background plate")
    sub.add_parser("segment", parents=[common], help="foreground masks")
    ev = sub.add_parser("evaluate", parents=[common], help="compare with ground truth")
    ev.add_argument("--gt", required=True, help="ground-truth transforms JSON")
    ev.add_argument("--size", type=_size, help="frame size WxH when --frames is not given")
    ev.add_argument("--masks", help="directory of foreground masks excluded from BRE")
    sy = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    sy.add_argument("--scene", help="scene spec file (key=value)")
    sy.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="scene spec override, repeatable")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "compensate":
            return cmd_compensate(cfg)
        if args.command == "render":
            return cmd_render(cfg)
        if args.command == "background":
            return cmd_background(cfg)
        if args.command == "segment":
            return cmd_segment(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.gt, args.size, args.masks)
        return cmd_synth(cfg, args.scene, args.set)
    except imageio.FrameReadError as exc:
        diag = {"error": "unreadable-frame", "frame": exc.path, "message": exc.reason}
    except MissingInputError as exc:
        diag = {"error": "missing-input", "message": str(exc)}
    except CongealError as exc:
        diag = {"error": "solver-abort", "message": str(exc)}
    except compositor.CanvasTooLargeError as exc:
        diag = {"error": "canvas-too-large", "message": str(exc)}
    except (GeometryError, ValueError, OSError) as exc:
        diag = {"error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(diag, sort_keys=True) + "\n")
    return 2


if __name__ == "__main__":
    sys.exit(main())
