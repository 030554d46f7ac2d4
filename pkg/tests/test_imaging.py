import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from manetl.exceptions import DimensionError, FormatError
from manetl.imaging import (decode_bmp, encode_bmp, invert_colors, preprocess_image,
                            resize_bilinear, rotate_with_fill, to_grayscale)

EXPECTED_2X2 = np.array([[[255, 0, 0], [0, 255, 0]],
                         [[0, 0, 255], [10, 20, 30]]], dtype=np.uint8)


def _bmp_2x2(top_down=False):
    """Fixture written field by field: 14-byte file header, 40-byte info header, rows padded to 4."""
    file_header = b"BM" + struct.pack("<I", 70) + b"\x00\x00\x00\x00" + struct.pack("<I", 54)
    height = -2 if top_down else 2
    info = (struct.pack("<I", 40) + struct.pack("<i", 2) + struct.pack("<i", height)
            + struct.pack("<H", 1) + struct.pack("<H", 24) + struct.pack("<I", 0)
            + struct.pack("<I", 16) + struct.pack("<i", 2835) * 2 + b"\x00" * 8)
    top_row = bytes([0x00, 0x00, 0xFF, 0x00, 0xFF, 0x00, 0x00, 0x00])
    bottom_row = bytes([0xFF, 0x00, 0x00, 0x1E, 0x14, 0x0A, 0x00, 0x00])
    rows = top_row + bottom_row if top_down else bottom_row + top_row
    return file_header + info + rows


class TestDecodeBmp:
    def test_fixture_pixels(self):
        np.testing.assert_array_equal(decode_bmp(_bmp_2x2()), EXPECTED_2X2)

    def test_bottom_up_equals_top_down(self):
        np.testing.assert_array_equal(decode_bmp(_bmp_2x2(False)), decode_bmp(_bmp_2x2(True)))

    def test_truncated(self):
        with pytest.raises(FormatError, match="truncated"):
            decode_bmp(_bmp_2x2()[:60])
        with pytest.raises(FormatError):
            decode_bmp(b"BM\x00")

    def test_compressed_rejected(self):
        data = bytearray(_bmp_2x2())
        data[30:34] = struct.pack("<I", 1)
        with pytest.raises(FormatError, match="compression"):
            decode_bmp(bytes(data))

    def test_bit_depth_rejected(self):
        data = bytearray(_bmp_2x2())
        data[28:30] = struct.pack("<H", 8)
        with pytest.raises(FormatError, match="bits_per_pixel"):
            decode_bmp(bytes(data))

    def test_bad_signature(self):
        with pytest.raises(FormatError, match="signature"):
            decode_bmp(b"XX" + _bmp_2x2()[2:])

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))),
           st.booleans())
    def test_encode_round_trip(self, pixels, top_down):
        np.testing.assert_array_equal(decode_bmp(encode_bmp(pixels, top_down)), pixels)

    def test_encoder_matches_fixture(self):
        assert encode_bmp(EXPECTED_2X2) == _bmp_2x2()


class TestColor:
    def test_invert_values(self):
        assert invert_colors(np.array([0], dtype=np.uint8))[0] == 255
        np.testing.assert_array_equal(invert_colors(np.array([12, 200, 34], dtype=np.uint8)),
                                      [243, 55, 221])

    @given(hnp.arrays(np.uint8, (4, 5, 3)))
    def test_invert_involution(self, pixels):
        np.testing.assert_array_equal(invert_colors(invert_colors(pixels)), pixels)

    @given(st.integers(0, 255))
    def test_gray_pixel(self, g):
        assert to_grayscale(np.full((1, 1, 3), g, dtype=np.uint8))[0, 0] == g

    def test_primaries(self):
        red = to_grayscale(np.array([[[255, 0, 0]]], dtype=np.uint8))[0, 0]
        green = to_grayscale(np.array([[[0, 255, 0]]], dtype=np.uint8))[0, 0]
        assert (red, green) == (76, 150)

    @given(hnp.arrays(np.uint8, (3, 4, 3)))
    def test_gray_round_trip(self, pixels):
        gray = to_grayscale(pixels)
        again = to_grayscale(np.repeat(gray[..., None], 3, axis=2))
        np.testing.assert_array_equal(again, gray)

    def test_gray_needs_three_channels(self):
        with pytest.raises(DimensionError):
            to_grayscale(np.zeros((2, 2, 4), dtype=np.uint8))


class TestRotate:
    def test_zero_angle_identity(self):
        img = np.random.default_rng(0).integers(0, 256, (9, 7), dtype=np.uint8)
        out = rotate_with_fill(img, 0.0)
        np.testing.assert_array_equal(out, img)
        assert out.dtype == img.dtype

    @pytest.mark.parametrize("angle", [-30, -12.5, 7, 30])
    def test_constant_image(self, angle):
        img = np.full((11, 11), 90, dtype=np.uint8)
        np.testing.assert_array_equal(rotate_with_fill(img, angle, fill=90), img)

    def test_corners_filled(self):
        img = np.full((20, 20), 200, dtype=np.uint8)
        out = rotate_with_fill(img, 30, fill=0)
        assert out[0, 0] == 0 and out[-1, -1] == 0
        assert out[10, 10] == 200

    def test_round_trip_90(self):
        img = np.zeros((16, 16), dtype=np.uint8)
        img[5:11, 5:11] = 255
        img[7:9, 7:9] = 128
        back = rotate_with_fill(rotate_with_fill(img, 90), -90)
        interior = slice(2, 14)
        diff = np.abs(back[interior, interior].astype(int) - img[interior, interior].astype(int))
        assert diff.max() <= 2

    def test_direction_counter_clockwise(self):
        img = np.zeros((5, 5))
        img[2, 4] = 1.0  # right of center
        out = rotate_with_fill(img, 90)
        assert out[0, 2] == pytest.approx(1.0)  # now above center

    def test_multichannel(self):
        img = np.random.default_rng(1).integers(0, 256, (8, 8, 3), dtype=np.uint8)
        assert rotate_with_fill(img, 10).shape == (8, 8, 3)


class TestPipeline:
    def test_white_becomes_zero(self):
        out = preprocess_image(np.full((40, 30, 3), 255, dtype=np.uint8))
        assert out.shape == (1, 32, 32)
        assert np.all(out == 0)

    def test_deterministic_without_augment(self):
        raw = np.random.default_rng(2).integers(0, 256, (48, 48, 3), dtype=np.uint8)
        a, b = preprocess_image(raw), preprocess_image(raw)
        assert a.tobytes() == b.tobytes()

    def test_seeded_augment_replays(self):
        raw = np.random.default_rng(3).integers(0, 256, (48, 48, 3), dtype=np.uint8)
        a = preprocess_image(raw, True, np.random.default_rng(9))
        b = preprocess_image(raw, True, np.random.default_rng(9))
        c = preprocess_image(raw, True, np.random.default_rng(10))
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()

    @settings(max_examples=25, deadline=None)
    @given(hnp.arrays(np.uint8, st.tuples(st.integers(4, 40), st.integers(4, 40), st.just(3))),
           st.booleans())
    def test_shape_and_range(self, raw, augment):
        out = preprocess_image(raw, augment, np.random.default_rng(0))
        assert out.shape == (1, 32, 32) and out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_resize_identity_and_constant(self):
        img = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(resize_bilinear(img, 3, 4), img)
        np.testing.assert_allclose(resize_bilinear(np.full((7, 9), 5.0), 32, 32), 5.0)
