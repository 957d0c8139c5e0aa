"""Corruption pipelines: where noise is added and what the network sees.

The tokenizer and schedule combine into three pipeline spaces:

  latent_in_latent_out  corrupt z0, feed z_t, predict in latent space
  image_in_latent_out   corrupt z0, feed the decoded image of z_t,
                        predict in latent space
  image_in_image_out    decoded input and pixel-patch output

For image-space inputs the decoded corruption lives in the tokenizer's
span; drop_orthogonal_complement controls whether the image content
outside that span is discarded (the default) or carried through
unchanged. corrupt_pixels adds noise directly to pixels with no
tokenizer, for side-by-side comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import image as image_mod
from .patches import assemble_patches, extract_patches
from .schedule import DiffusionDraw, NoiseSchedule, diffuse
from .tokenizer import PatchBasis, decode, encode

PIPELINE_SPACES = (
    "latent_in_latent_out",
    "image_in_latent_out",
    "image_in_image_out",
)


@dataclass(frozen=True)
class CorruptionConfig:
    basis: PatchBasis
    schedule: NoiseSchedule
    space: str = "latent_in_latent_out"
    drop_orthogonal_complement: bool = True

    def __post_init__(self):
        if self.space not in PIPELINE_SPACES:
            raise ValueError(f"unknown pipeline space {self.space!r}")

    @property
    def image_input(self) -> bool:
        return self.space != "latent_in_latent_out"

    @property
    def image_output(self) -> bool:
        return self.space == "image_in_image_out"


def corrupt_latent(
    z0: np.ndarray, schedule: NoiseSchedule, t, rng: np.random.Generator
) -> DiffusionDraw:
    """Corrupt clean latent tokens; thin wrapper over diffuse."""
    return diffuse(z0, schedule, t, rng)


def latent_to_image(
    cfg: CorruptionConfig, z: np.ndarray, x_patches: np.ndarray | None = None
) -> np.ndarray:
    """Decode latent tokens (..., d) to pixel patches (..., D).

    When the complement is kept, x_patches supplies the content outside
    the tokenizer span, which passes through untouched.
    """
    out = decode(cfg.basis, z)
    if not cfg.drop_orthogonal_complement:
        if x_patches is None:
            raise ValueError("need source patches to keep the orthogonal complement")
        out = out + (x_patches - decode(cfg.basis, encode(cfg.basis, x_patches)))
    return out


def corrupt_image(
    img: np.ndarray, cfg: CorruptionConfig, t, rng: np.random.Generator
) -> tuple[np.ndarray, DiffusionDraw]:
    """Corrupt one image through the latent pipeline; returns (x_t, draw).

    The image is tokenized, noised in latent space, and decoded back, so
    the visible corruption is the image of latent noise, not pixel noise.
    """
    image_mod.validate_image(img)
    pat = extract_patches(img, cfg.basis.patch_size)
    draw = diffuse(encode(cfg.basis, pat), cfg.schedule, t, rng)
    noisy = latent_to_image(cfg, draw.z_t, pat)
    h, w = img.shape[:2]
    return assemble_patches(noisy, h, w, cfg.basis.patch_size), draw


def corrupt_pixels(
    img: np.ndarray, schedule: NoiseSchedule, t, rng: np.random.Generator
) -> np.ndarray:
    """Corrupt raw pixels directly (no tokenizer), for comparison panels."""
    image_mod.validate_image(img)
    draw = diffuse(img, schedule, t, rng)
    return draw.z_t


def triptych(panels: list[np.ndarray], gutter: int = 4) -> np.ndarray:
    """Concatenate equal-height panels left to right with white gutters."""
    if not panels:
        raise ValueError("no panels")
    h = panels[0].shape[0]
    for p in panels:
        if p.shape[0] != h or p.ndim != 3:
            raise ValueError("panels must share height and be (H, W, 3)")
    sep = np.ones((h, gutter, 3))
    parts: list[np.ndarray] = []
    for i, p in enumerate(panels):
        if i:
            parts.append(sep)
        parts.append(p)
    return np.concatenate(parts, axis=1)


def export_panels(path, panels: list[np.ndarray], gutter: int = 4) -> None:
    """Clamp panels to [-1, 1] and write them as one PPM strip."""
    strip = triptych(panels, gutter)
    image_mod.write_ppm(path, image_mod.to_uint8(strip))
