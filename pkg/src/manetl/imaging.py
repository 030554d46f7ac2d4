"""BMP decoding/encoding and the character preprocessing pipeline.

Pipeline order: invert -> grayscale -> (optional) random rotation with the
post-inversion background as fill -> bilinear resize -> scale to [0, 1].
"""

import hashlib
import json
import struct

import numpy as np

from .exceptions import DimensionError, FormatError

INPUT_SIZE = 32
ROTATION_RANGE = 15.0
BACKGROUND = 0

_FILE_HEADER = struct.Struct("<2sIHHI")
_INFO_HEADER = struct.Struct("<IiiHHIIiiII")
_SUPPORTED_INFO_SIZES = (40, 52, 56, 108, 124)


def decode_bmp(data: bytes) -> np.ndarray:
    """Decode an uncompressed 24-bit BMP into a top-down (H, W, 3) RGB uint8 array."""
    data = bytes(data)
    if len(data) < _FILE_HEADER.size + _INFO_HEADER.size:
        raise FormatError("truncated BMP: header incomplete")
    signature, _, _, _, offset = _FILE_HEADER.unpack_from(data, 0)
    if signature != b"BM":
        raise FormatError(f"not a BMP file: bad signature {signature!r}")
    (info_size, width, height, planes, bpp, compression,
     _, _, _, _, _) = _INFO_HEADER.unpack_from(data, _FILE_HEADER.size)
    if info_size not in _SUPPORTED_INFO_SIZES:
        raise FormatError(f"unsupported BMP header: header_size={info_size}")
    if planes != 1:
        raise FormatError(f"unsupported BMP header: planes={planes}")
    if bpp != 24:
        raise FormatError(f"unsupported BMP header: bits_per_pixel={bpp} (only 24 is supported)")
    if compression != 0:
        raise FormatError(f"unsupported BMP header: compression={compression} (only BI_RGB)")
    if width <= 0:
        raise FormatError(f"invalid BMP header: width={width}")
    if height == 0:
        raise FormatError("invalid BMP header: height=0")

    rows = abs(height)
    stride = (width * 3 + 3) & ~3
    end = offset + stride * rows
    if offset < _FILE_HEADER.size + info_size or end > len(data):
        raise FormatError(
            f"truncated BMP: pixel data needs {end} bytes, file has {len(data)}"
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=stride * rows, offset=offset)
    grid = raw.reshape(rows, stride)[:, :width * 3].reshape(rows, width, 3)
    if height > 0:
        grid = grid[::-1]
    return np.ascontiguousarray(grid[:, :, ::-1])


def encode_bmp(pixels: np.ndarray, top_down: bool = False) -> bytes:
    """Encode an (H, W, 3) RGB uint8 array as a 24-bit BI_RGB BMP."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise DimensionError(f"encode_bmp needs (H, W, 3) uint8, got {pixels.shape} {pixels.dtype}")
    height, width, _ = pixels.shape
    stride = (width * 3 + 3) & ~3
    rows = pixels[:, :, ::-1]
    if not top_down:
        rows = rows[::-1]
    body = np.zeros((height, stride), dtype=np.uint8)
    body[:, :width * 3] = rows.reshape(height, width * 3)
    offset = _FILE_HEADER.size + _INFO_HEADER.size
    size = offset + body.size
    header = _FILE_HEADER.pack(b"BM", size, 0, 0, offset)
    info = _INFO_HEADER.pack(40, width, -height if top_down else height, 1, 24, 0,
                             body.size, 2835, 2835, 0, 0)
    return header + info + body.tobytes()


def invert_colors(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise TypeError("invert_colors expects 8-bit channels")
    return 255 - pixels


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """BT.601 luminance of an RGB image, rounded half-up to 8 bits."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DimensionError(f"to_grayscale expects (H, W, 3) input, got {pixels.shape}")
    rgb = pixels.astype(np.int64)
    # integer arithmetic keeps the half-up rounding exact
    y = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return y.astype(np.uint8)


def _bilinear(padded, sx, sy):
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    if padded.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = padded[y0, x0] * (1 - fx) + padded[y0, x0 + 1] * fx
    bottom = padded[y0 + 1, x0] * (1 - fx) + padded[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bottom * fy


def _restore_dtype(values, dtype):
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        return np.clip(np.floor(values + 0.5), info.min, info.max).astype(dtype)
    return values.astype(dtype)


def rotate_with_fill(pixels: np.ndarray, angle: float, fill=BACKGROUND) -> np.ndarray:
    """Rotate counter-clockwise by ``angle`` degrees about the image center.

    Bilinear interpolation; pixels whose source falls outside the image take
    ``fill``. Works on (H, W) or (H, W, C) arrays; integer inputs are rounded
    back to their dtype.
    """
    pixels = np.asarray(pixels)
    if angle == 0:
        return pixels.copy()
    height, width = pixels.shape[:2]
    pad = [(1, 1), (1, 1)] + [(0, 0)] * (pixels.ndim - 2)
    padded = np.pad(pixels.astype(np.float64), pad, constant_values=fill)

    theta = np.deg2rad(angle)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.mgrid[0:height, 0:width]
    dx, dy = xx - cx, yy - cy
    sx = cos * dx - sin * dy + cx + 1.0
    sy = sin * dx + cos * dy + cy + 1.0

    eps = 1e-9
    inside = (sx >= -eps) & (sx <= width + 1 + eps) & (sy >= -eps) & (sy <= height + 1 + eps)
    sx = np.clip(sx, 0.0, width + 1 - 1e-9)
    sy = np.clip(sy, 0.0, height + 1 - 1e-9)
    out = _bilinear(padded, sx, sy)
    mask = inside if out.ndim == 2 else inside[..., None]
    out = np.where(mask, out, fill)
    return _restore_dtype(out, pixels.dtype)


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of an (H, W) array (float result)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    height, width = pixels.shape[:2]
    if (height, width) == (out_h, out_w):
        return pixels.copy()
    sy = np.clip((np.arange(out_h) + 0.5) * (height / out_h) - 0.5, 0, height - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (width / out_w) - 0.5, 0, width - 1)
    y0 = np.minimum(np.floor(sy).astype(np.intp), max(height - 2, 0))
    x0 = np.minimum(np.floor(sx).astype(np.intp), max(width - 2, 0))
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    top = pixels[y0][:, x0] * (1 - fx) + pixels[y0][:, x1] * fx
    bottom = pixels[y1][:, x0] * (1 - fx) + pixels[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def preprocess_image(pixels, augment=False, rng=None, size=INPUT_SIZE, invert=True,
                     rotation_range=ROTATION_RANGE):
    """Raw (H, W, 3) uint8 -> float32 (1, size, size) in [0, 1]."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DimensionError(f"raw images must be (H, W, 3), got {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise TypeError("raw images must have 8-bit channels")
    if invert:
        pixels = invert_colors(pixels)
    gray = to_grayscale(pixels).astype(np.float64)
    if augment:
        if rng is None:
            raise ValueError("augmentation needs a random generator")
        angle = rng.uniform(-rotation_range, rotation_range)
        gray = rotate_with_fill(gray, angle, fill=BACKGROUND)
    resized = resize_bilinear(gray, size, size)
    return np.clip(resized / 255.0, 0.0, 1.0).astype(np.float32)[None]


def pipeline_fingerprint(size=INPUT_SIZE, invert=True, rotation_range=ROTATION_RANGE):
    """Stable hash of every parameter that shapes preprocessing output."""
    params = {
        "steps": ["invert", "grayscale", "rotate", "resize", "scale"] if invert
        else ["grayscale", "rotate", "resize", "scale"],
        "grayscale": "bt601-int-half-up",
        "rotation_range": rotation_range,
        "rotation_fill": BACKGROUND,
        "interpolation": "bilinear",
        "size": size,
    }
    blob = json.dumps(params, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
