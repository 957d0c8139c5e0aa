"""Image values, conversions, and binary PPM I/O.

In-memory images are float64 arrays of shape (H, W, 3) with values in
[-1, 1]. On disk they are 8-bit binary PPM (P6); the uint8 <-> float maps
below are exact inverses on the uint8 lattice, so a write/read round trip
is bit-identical.
"""

from __future__ import annotations

import numpy as np

# Peak-to-peak range of the float image encoding, used as the PSNR peak.
VALUE_PEAK = 2.0


def validate_image(img: np.ndarray) -> None:
    """Raise ValueError unless img is a finite float (H, W, 3) array."""
    if not isinstance(img, np.ndarray):
        raise ValueError(f"expected ndarray, got {type(img).__name__}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected shape (H, W, 3), got {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        raise ValueError(f"expected float dtype, got {img.dtype}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to uint8; values outside the range are clamped."""
    v = np.clip(img, -1.0, 1.0)
    return np.round((v + 1.0) * 127.5).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    """Map uint8 to float64 in [-1, 1]; inverse of to_uint8 on the lattice."""
    return raw.astype(np.float64) / 127.5 - 1.0


def write_ppm(path, raw: np.ndarray) -> None:
    """Write a (H, W, 3) uint8 array as binary PPM (P6, maxval 255)."""
    if raw.dtype != np.uint8 or raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected uint8 (H, W, 3), got {raw.dtype} {raw.shape}")
    h, w = raw.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(raw).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6, maxval 255) into a (H, W, 3) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (missing P6 magic)")

    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments running to end of line. One whitespace byte follows
    # maxval, then raw pixel data.
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    n = h * w * 3
    pixels = data[pos : pos + n]
    if len(pixels) != n:
        raise ValueError(f"{path}: expected {n} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def psnr(a: np.ndarray, b: np.ndarray, peak: float = VALUE_PEAK) -> float:
    """Peak signal-to-noise ratio in dB between two float images."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def hflip(img: np.ndarray) -> np.ndarray:
    """Mirror an image (or batch of images) left-right."""
    return np.ascontiguousarray(img[..., ::-1, :])


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H, W, C) with bilinear interpolation, pixel centers aligned."""
    h, w = img.shape[:2]
    # Map output pixel centers into input coordinates (align-centers
    # convention), then clamp so border samples stay inside the image.
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]

    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def random_crop_resize(
    img: np.ndarray, rng: np.random.Generator, min_frac: float = 0.8
) -> np.ndarray:
    """Crop a random square of side >= min_frac * H and resize back to (H, W)."""
    h, w = img.shape[:2]
    side = int(rng.integers(int(np.ceil(min_frac * min(h, w))), min(h, w) + 1))
    y = int(rng.integers(0, h - side + 1))
    x = int(rng.integers(0, w - side + 1))
    crop = img[y : y + side, x : x + side]
    if side == h and side == w:
        return crop.copy()
    return bilinear_resize(crop, h, w)
