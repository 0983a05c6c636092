"""Reading and writing numbered frame files (PNG, PGM, PPM) through Pillow."""
from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")
_NUMBER = re.compile(r"(\d+)(?!.*\d)")


class FrameReadError(IOError):
    """A frame file is missing, unreadable or has the wrong size."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


def read_image(path, gray=True):
    """Load an image as float in ``[0, 1]``; color is converted to luminance when ``gray``."""
    try:
        with Image.open(path) as im:
            im.load()
            if gray:
                im = im.convert("L") if im.mode not in ("L", "I;16", "I") else im
            elif im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise FrameReadError(path, f"cannot decode image ({exc})") from None
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max(initial=0) > 255 else 255.0
    return arr.astype(float) / scale


def write_image(path, image):
    """Save a ``[0, 1]`` float raster as 8-bit; NaN is written as 0."""
    arr = np.nan_to_num(np.asarray(image, dtype=float), nan=0.0)
    arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def frame_number(name):
    m = _NUMBER.search(os.path.basename(name))
    return int(m.group(1)) if m else None


def list_frames(directory):
    """Image files in ``directory`` sorted by the last number in their names."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"frame directory not found: {directory}")
    names = [n for n in os.listdir(directory) if n.lower().endswith(IMAGE_SUFFIXES)]
    numbered = [(frame_number(n), n) for n in names]
    missing = [n for k, n in numbered if k is None]
    if missing:
        raise ValueError(f"frame files without a number: {sorted(missing)}")
    numbered.sort()
    nums = [k for k, _ in numbered]
    if len(set(nums)) != len(nums):
        raise ValueError(f"duplicate frame numbers in {directory}")
    return [os.path.join(directory, n) for _, n in numbered]


def read_frames(directory):
    """All frames of a directory as grayscale arrays of identical size."""
    paths = list_frames(directory)
    frames = []
    for p in paths:
        img = read_image(p)
        if frames and img.shape != frames[0].shape:
            raise FrameReadError(p, f"size {img.shape[::-1]} differs from {frames[0].shape[::-1]}")
        frames.append(img)
    return frames, paths
