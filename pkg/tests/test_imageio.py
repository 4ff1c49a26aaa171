import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sadcnn.imageio import (PNG_ENABLED, ImageFormatError, load_gray, quantize, read_image,
                            write_image)


def test_p5_bytes(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    assert read_image(path).tolist() == [[0, 128], [255, 64]]
    np.testing.assert_allclose(load_gray(path), np.array([[0, 128], [255, 64]]) / 255.0)


def test_p6_with_comments(tmp_path):
    path = tmp_path / "c.ppm"
    raster = bytes(range(12))
    path.write_bytes(b"P6\n# made by hand\n2 # width\n# another\n2\n255\n" + raster)
    img = read_image(path)
    assert img.shape == (2, 2, 3)
    assert img.tobytes() == raster


def test_raster_may_start_with_whitespace_byte(tmp_path):
    path = tmp_path / "w.pgm"
    path.write_bytes(b"P5 2 1 255\n" + bytes([10, 32]))
    assert read_image(path).tolist() == [[10, 32]]


@pytest.mark.parametrize("data,msg", [
    (b"P5\n2 2\n", "truncated header"),
    (b"P5\n2 2\n255\n\x00\x01", "truncated raster"),
    (b"P5\n2 2\n65535\n" + bytes(8), "maxval"),
    (b"P2\n2 2\n255\n0 0 0 0", "magic"),
    (b"P5\n2 x\n255\n" + bytes(4), "non-integer"),
])
def test_malformed_files(tmp_path, data, msg):
    path = tmp_path / "bad.pgm"
    path.write_bytes(data)
    with pytest.raises(ImageFormatError, match=msg):
        read_image(path)


def test_quantize_rules():
    assert quantize(np.ones((3, 3))).tolist() == [[255] * 3] * 3
    assert quantize(np.array([0.5])).item() == 128
    assert quantize(np.array([-0.2, 1.7])).tolist() == [0, 255]


def test_halftone_file_only_extremes(tmp_path):
    img = (np.random.default_rng(0).random((9, 9)) < 0.5).astype(float)
    write_image(tmp_path / "h.pgm", img)
    assert set(np.unique(read_image(tmp_path / "h.pgm"))) <= {0, 255}


def test_write_p5_header(tmp_path):
    write_image(tmp_path / "x.pgm", np.zeros((2, 3)))
    assert (tmp_path / "x.pgm").read_bytes() == b"P5\n3 2\n255\n" + bytes(6)


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))), st.booleans())
def test_round_trip_bit_identical(tmp_path_factory, img, color):
    d = tmp_path_factory.mktemp("rt")
    if color:
        img = np.stack([img, img[::-1], 255 - img], axis=-1)
    path = d / ("x.ppm" if color else "x.pgm")
    write_image(path, img)
    assert np.array_equal(read_image(path), img)


def test_round_trip_quantized_floats(tmp_path):
    vals = np.arange(256).reshape(16, 16) / 255.0
    write_image(tmp_path / "f.pgm", vals)
    np.testing.assert_allclose(load_gray(tmp_path / "f.pgm"), vals, atol=1e-12)


@pytest.mark.skipif(not PNG_ENABLED, reason="Pillow not installed")
def test_png_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_image(tmp_path / "x.png", img)
    assert np.array_equal(read_image(tmp_path / "x.png"), img)


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_image(tmp_path / "missing" / "x.pgm", np.zeros((2, 2)))
