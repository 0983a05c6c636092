import numpy as np
import pytest
from PIL import Image

from keycongeal import imageio


def test_png_and_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 64 * 48).reshape(48, 64)
    for ext in ("png", "pgm"):
        p = tmp_path / f"f.{ext}"
        imageio.write_image(p, img)
        back = imageio.read_image(p)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_write_clips_and_zeroes_nan(tmp_path):
    p = tmp_path / "x.png"
    imageio.write_image(p, np.array([[np.nan, -1.0], [2.0, 0.5]]))
    assert np.asarray(Image.open(p)).tolist() == [[0, 0], [255, 128]]


def test_color_is_converted_to_luminance(tmp_path):
    rgb = np.zeros((4, 4, 3), np.uint8)
    rgb[..., 1] = 255
    p = tmp_path / "c.ppm"
    Image.fromarray(rgb).save(p)
    gray = imageio.read_image(p)
    assert gray.shape == (4, 4)
    assert gray[0, 0] == pytest.approx(round(0.587 * 255) / 255, abs=1 / 255)
    assert imageio.read_image(p, gray=False).shape == (4, 4, 3)


def test_list_frames_numeric_order(tmp_path):
    for n in (10, 2, 1):
        imageio.write_image(tmp_path / f"frame_{n}.png", np.zeros((4, 4)))
    (tmp_path / "notes.txt").write_text("x")
    names = [p.rsplit("/", 1)[-1] for p in imageio.list_frames(tmp_path)]
    assert names == ["frame_1.png", "frame_2.png", "frame_10.png"]


def test_list_frames_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        imageio.list_frames(tmp_path / "missing")
    imageio.write_image(tmp_path / "a1.png", np.zeros((4, 4)))
    imageio.write_image(tmp_path / "b1.png", np.zeros((4, 4)))
    with pytest.raises(ValueError, match="duplicate"):
        imageio.list_frames(tmp_path)


def test_corrupted_frame_named(tmp_path):
    imageio.write_image(tmp_path / "f_0.png", np.zeros((8, 8)))
    (tmp_path / "f_1.png").write_bytes(b"not an image")
    with pytest.raises(imageio.FrameReadError) as exc:
        imageio.read_frames(tmp_path)
    assert exc.value.path.endswith("f_1.png")


def test_size_mismatch_named(tmp_path):
    imageio.write_image(tmp_path / "f_0.png", np.zeros((8, 8)))
    imageio.write_image(tmp_path / "f_1.png", np.zeros((8, 9)))
    with pytest.raises(imageio.FrameReadError, match="f_1.png"):
        imageio.read_frames(tmp_path)
