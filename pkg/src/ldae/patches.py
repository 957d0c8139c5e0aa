"""Non-overlapping patch gridding.

An image of shape (H, W, 3) becomes a row-major grid of (H/p) x (W/p)
patches; each patch is flattened in (row, column, channel) order to a
vector of length D = 3 * p**2. extract and assemble are exact inverses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def patch_dim(patch_size: int) -> int:
    """Flattened patch length D for a given patch side."""
    return 3 * patch_size * patch_size


def _check_divisible(h: int, w: int, p: int) -> None:
    if p <= 0:
        raise ValueError(f"patch size must be positive, got {p}")
    if h % p or w % p:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")


def extract_patches(img: np.ndarray, patch_size: int) -> np.ndarray:
    """Return the (N, D) patch matrix of an image, N = (H/p) * (W/p)."""
    h, w, c = img.shape
    p = patch_size
    _check_divisible(h, w, p)
    # (gh, p, gw, p, c) -> (gh, gw, p, p, c), then flatten each patch.
    x = img.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x).reshape((h // p) * (w // p), p * p * c)


def assemble_patches(pat: np.ndarray, h: int, w: int, patch_size: int) -> np.ndarray:
    """Inverse of extract_patches; pat has shape (N, D)."""
    p = patch_size
    _check_divisible(h, w, p)
    n, d = pat.shape
    if d % (p * p) != 0:
        raise ValueError(f"patch length {d} not a multiple of {p}*{p}")
    c = d // (p * p)
    if n != (h // p) * (w // p):
        raise ValueError(f"expected {(h // p) * (w // p)} patches for {h}x{w}, got {n}")
    x = pat.reshape(h // p, w // p, p, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x).reshape(h, w, c)


def extract_patches_batch(imgs: np.ndarray, patch_size: int) -> np.ndarray:
    """Patch matrices for a (B, H, W, 3) batch; returns (B, N, D)."""
    b, h, w, c = imgs.shape
    p = patch_size
    _check_divisible(h, w, p)
    x = imgs.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, (h // p) * (w // p), p * p * c)


def assemble_patches_batch(
    pat: np.ndarray, h: int, w: int, patch_size: int
) -> np.ndarray:
    """Inverse of extract_patches_batch; pat has shape (B, N, D)."""
    p = patch_size
    _check_divisible(h, w, p)
    b, n, d = pat.shape
    c = d // (p * p)
    if n != (h // p) * (w // p) or d != p * p * c:
        raise ValueError(f"bad patch matrix {pat.shape} for {h}x{w} at patch {p}")
    x = pat.reshape(b, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, h, w, c)


@dataclass(frozen=True)
class PatchSample:
    """Patches drawn for basis fitting: rows are flattened patches."""

    patches: np.ndarray  # (N, D)
    patch_size: int
    source_images: int

    def __post_init__(self):
        if self.patches.ndim != 2:
            raise ValueError(f"expected (N, D) sample, got {self.patches.shape}")
        if self.patches.shape[1] != patch_dim(self.patch_size):
            raise ValueError(
                f"patch length {self.patches.shape[1]} does not match "
                f"patch size {self.patch_size}"
            )


def sample_patches(
    imgs: np.ndarray, patch_size: int, count: int, rng: np.random.Generator
) -> PatchSample:
    """Draw count patches uniformly over images and spatial offsets.

    Offsets are not grid-aligned, so the sample sees all phases of the
    content; imgs has shape (B, H, W, 3).
    """
    b, h, w, _ = imgs.shape
    p = patch_size
    if count <= 0:
        raise ValueError(f"sample count must be positive, got {count}")
    if p > h or p > w:
        raise ValueError(f"patch size {p} exceeds image size {h}x{w}")
    idx = rng.integers(0, b, size=count)
    ys = rng.integers(0, h - p + 1, size=count)
    xs = rng.integers(0, w - p + 1, size=count)
    out = np.empty((count, patch_dim(p)), dtype=np.float64)
    for k in range(count):
        out[k] = imgs[idx[k], ys[k] : ys[k] + p, xs[k] : xs[k] + p].reshape(-1)
    return PatchSample(patches=out, patch_size=p, source_images=b)
