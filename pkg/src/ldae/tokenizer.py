"""Patch tokenizers: linear maps between pixel patches and latent tokens.

A PatchBasis encodes flattened patches x (length D) to latents z (length
d) and decodes back. Four kinds:

  pca        eigenbasis of the patch covariance; optimal linear
             reconstruction, orthonormal rows
  linear_ae  encoder/decoder pair fit by gradient descent on
             reconstruction error
  linear_vae linear_ae plus a quadratic penalty on latent magnitude
  identity   D == d passthrough, no centering

Encode is z = enc @ (x - mean); decode is x = dec.T @ z + mean (row
convention: z = (x - mean) @ enc.T). Fits are deterministic given the
sample, latent size, and seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint
from .patches import PatchSample, patch_dim
from .rng import child_rng

BASIS_KINDS = ("pca", "linear_ae", "linear_vae", "identity")


@dataclass(frozen=True)
class PatchBasis:
    """A fitted tokenizer. Treat all arrays as read-only."""

    kind: str
    patch_size: int
    dim_full: int  # D = 3 * patch_size**2
    dim_latent: int  # d <= D
    mean: np.ndarray  # (D,)
    enc: np.ndarray  # (d, D); rows map centered pixels to latent coords
    dec: np.ndarray  # (d, D); decode is z @ dec + mean
    eigenvalues: np.ndarray | None = None  # (D,) descending; pca only
    enc_full: np.ndarray | None = None  # (D, D) complete eigenbasis; pca only

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.dim_full != patch_dim(self.patch_size):
            raise ValueError(
                f"dim_full {self.dim_full} does not match patch size {self.patch_size}"
            )
        if not (1 <= self.dim_latent <= self.dim_full):
            raise ValueError(
                f"latent size {self.dim_latent} out of range [1, {self.dim_full}]"
            )
        if self.mean.shape != (self.dim_full,):
            raise ValueError(f"mean shape {self.mean.shape}")
        want = (self.dim_latent, self.dim_full)
        if self.enc.shape != want or self.dec.shape != want:
            raise ValueError(
                f"enc/dec shapes {self.enc.shape}/{self.dec.shape}, expected {want}"
            )

    @property
    def invertible(self) -> bool:
        """True when decode(encode(x)) == x for all x (up to rounding)."""
        return self.kind == "identity" or (
            self.kind == "pca" and self.dim_latent == self.dim_full
        )


def encode(basis: PatchBasis, x: np.ndarray) -> np.ndarray:
    """Map patches (..., D) to latents (..., d)."""
    if x.shape[-1] != basis.dim_full:
        raise ValueError(f"patch length {x.shape[-1]}, expected {basis.dim_full}")
    if basis.kind == "identity":
        return np.array(x, dtype=np.float64, copy=True)
    return (x - basis.mean) @ basis.enc.T


def decode(basis: PatchBasis, z: np.ndarray) -> np.ndarray:
    """Map latents (..., d) back to patches (..., D)."""
    if z.shape[-1] != basis.dim_latent:
        raise ValueError(f"latent length {z.shape[-1]}, expected {basis.dim_latent}")
    if basis.kind == "identity":
        return np.array(z, dtype=np.float64, copy=True)
    return z @ basis.dec + basis.mean


def reconstruction_error(basis: PatchBasis, x: np.ndarray) -> float:
    """Mean squared reconstruction norm per patch, ||x - dec(enc(x))||^2."""
    r = x - decode(basis, encode(basis, x))
    return float(np.mean(np.sum(r * r, axis=-1)))


def _check_sample(sample: PatchSample, dim_latent: int) -> np.ndarray:
    x = sample.patches
    d_full = patch_dim(sample.patch_size)
    if x.shape[0] < 1:
        raise ValueError("empty patch sample")
    if not (1 <= dim_latent <= d_full):
        raise ValueError(f"latent size {dim_latent} out of range [1, {d_full}]")
    if x.shape[0] < dim_latent:
        raise ValueError(f"sample has {x.shape[0]} rows, fewer than latent size")
    return np.asarray(x, dtype=np.float64)


def fit_pca(sample: PatchSample, dim_latent: int) -> PatchBasis:
    """Principal-component basis of the sample, top dim_latent directions.

    The covariance uses the 1/N normalization, so the mean squared
    reconstruction norm on the fitting sample equals the sum of the
    discarded eigenvalues exactly. Eigenvector sign is fixed by making
    each row's largest-magnitude entry positive.
    """
    x = _check_sample(sample, dim_latent)
    d_full = x.shape[1]
    if x.shape[0] < d_full:
        warnings.warn(
            f"fitting PCA from {x.shape[0]} patches < dimension {d_full}; "
            "trailing directions are degenerate",
            stacklevel=2,
        )
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    v = evecs[:, order].T  # rows are eigenvectors, descending eigenvalue
    flip = v[np.arange(d_full), np.argmax(np.abs(v), axis=1)] < 0
    v[flip] *= -1.0
    enc = np.ascontiguousarray(v[:dim_latent])
    return PatchBasis(
        kind="pca",
        patch_size=sample.patch_size,
        dim_full=d_full,
        dim_latent=dim_latent,
        mean=mean,
        enc=enc,
        dec=enc.copy(),
        eigenvalues=evals,
        enc_full=np.ascontiguousarray(v),
    )


def identity_basis(patch_size: int) -> PatchBasis:
    """Raw pixel tokens: d == D, no centering, exact round trip."""
    d = patch_dim(patch_size)
    eye = np.eye(d)
    return PatchBasis(
        kind="identity",
        patch_size=patch_size,
        dim_full=d,
        dim_latent=d,
        mean=np.zeros(d),
        enc=eye,
        dec=eye.copy(),
    )


class TrainingDiverged(RuntimeError):
    """Raised when an iterative fit produces a non-finite loss."""


@dataclass(frozen=True)
class GdConfig:
    """Gradient-descent settings for the linear autoencoder fits.

    lr is relative to the top covariance eigenvalue (see _fit_linear);
    values much above 0.5 can diverge for near-full-rank fits.
    """

    steps: int = 6000
    lr: float = 0.5
    seed: int = 0


def _fit_linear(
    sample: PatchSample, dim_latent: int, kl_weight: float, cfg: GdConfig, kind: str
) -> PatchBasis:
    """Shared fit for linear_ae (kl_weight = 0) and linear_vae.

    Minimizes mean ||x - U.T V x||^2 over centered patches, plus
    kl_weight * mean(||V x||^2 / 2), by full-batch gradient descent with a
    half-cycle cosine learning-rate decay. V is the encoder, U the decoder.
    """
    x = _check_sample(sample, dim_latent)
    n, d_full = x.shape
    mean = x.mean(axis=0)
    xc = x - mean

    rng = child_rng(cfg.seed, "linear-basis", kind, dim_latent)
    scale = 1.0 / np.sqrt(d_full)
    v = rng.standard_normal((dim_latent, d_full)) * scale
    u = rng.standard_normal((dim_latent, d_full)) * scale

    # The loss only touches the data through its Gram matrix, so each step
    # costs O(d * D^2) regardless of sample size. The learning rate is
    # expressed relative to the top covariance eigenvalue, which sets the
    # curvature scale; without this, the stable range depends on the data.
    gram = (xc.T @ xc) / n  # (D, D)
    lr_scale = 1.0 / max(float(np.linalg.eigvalsh(gram)[-1]), 1e-12)
    warmup = max(1, cfg.steps // 50)
    for step in range(cfg.steps):
        if step < warmup:
            lr = lr_scale * cfg.lr * step / warmup
        else:
            frac = (step - warmup) / (cfg.steps - warmup)
            lr = lr_scale * cfg.lr * 0.5 * (1.0 + np.cos(np.pi * frac))
        vg = v @ gram  # (d, D)
        ug = u @ gram  # (d, D)
        du = -2.0 * (vg - (vg @ v.T) @ u)
        dv = -2.0 * (ug - (u @ u.T) @ vg) + kl_weight * vg
        if not (np.isfinite(du).all() and np.isfinite(dv).all()):
            raise TrainingDiverged(f"non-finite gradient at step {step}")
        u = u - lr * du
        v = v - lr * dv

    recon = xc - (xc @ v.T) @ u
    loss = float(np.mean(np.sum(recon * recon, axis=-1)))
    if not np.isfinite(loss):
        raise TrainingDiverged("non-finite loss after final step")
    return PatchBasis(
        kind=kind,
        patch_size=sample.patch_size,
        dim_full=d_full,
        dim_latent=dim_latent,
        mean=mean,
        enc=np.ascontiguousarray(v),
        dec=np.ascontiguousarray(u),
    )


def fit_linear_ae(
    sample: PatchSample, dim_latent: int, cfg: GdConfig = GdConfig()
) -> PatchBasis:
    """Linear autoencoder fit by gradient descent (no orthogonality)."""
    return _fit_linear(sample, dim_latent, 0.0, cfg, "linear_ae")


def fit_linear_vae(
    sample: PatchSample,
    dim_latent: int,
    kl_weight: float = 1e-3,
    cfg: GdConfig = GdConfig(),
) -> PatchBasis:
    """Linear autoencoder with a latent-magnitude penalty of kl_weight."""
    if kl_weight < 0:
        raise ValueError(f"kl_weight must be non-negative, got {kl_weight}")
    return _fit_linear(sample, dim_latent, kl_weight, cfg, "linear_vae")


def fit_basis(
    kind: str,
    sample: PatchSample,
    dim_latent: int,
    cfg: GdConfig = GdConfig(),
    kl_weight: float = 1e-3,
) -> PatchBasis:
    """Fit any basis kind by name with shared defaults."""
    if kind == "pca":
        return fit_pca(sample, dim_latent)
    if kind == "linear_ae":
        return fit_linear_ae(sample, dim_latent, cfg)
    if kind == "linear_vae":
        return fit_linear_vae(sample, dim_latent, kl_weight, cfg)
    if kind == "identity":
        basis = identity_basis(sample.patch_size)
        if dim_latent != basis.dim_latent:
            raise ValueError(
                f"identity basis requires latent size {basis.dim_latent}, "
                f"got {dim_latent}"
            )
        return basis
    raise ValueError(f"unknown basis kind {kind!r}")


def save_basis(path, basis: PatchBasis) -> None:
    """Serialize a basis to the binary container format."""
    scalars = {
        "kind": basis.kind,
        "patch_size": basis.patch_size,
        "dim_full": basis.dim_full,
        "dim_latent": basis.dim_latent,
    }
    tensors = {"mean": basis.mean, "enc": basis.enc, "dec": basis.dec}
    if basis.eigenvalues is not None:
        tensors["eigenvalues"] = basis.eigenvalues
    if basis.enc_full is not None:
        tensors["enc_full"] = basis.enc_full
    checkpoint.save_container(path, "patch_basis", scalars, tensors)


def load_basis(path) -> PatchBasis:
    """Load a basis saved by save_basis; bit-exact round trip."""
    _, scalars, tensors = checkpoint.load_container(path, expect_kind="patch_basis")
    return PatchBasis(
        kind=str(scalars["kind"]),
        patch_size=int(scalars["patch_size"]),
        dim_full=int(scalars["dim_full"]),
        dim_latent=int(scalars["dim_latent"]),
        mean=tensors["mean"],
        enc=tensors["enc"],
        dec=tensors["dec"],
        eigenvalues=tensors.get("eigenvalues"),
        enc_full=tensors.get("enc_full"),
    )


def truncate_basis(basis: PatchBasis, dim_latent: int) -> PatchBasis:
    """Restrict a PCA basis to its leading dim_latent directions."""
    if basis.kind != "pca":
        raise ValueError("only pca bases can be truncated")
    if not (1 <= dim_latent <= basis.dim_latent):
        raise ValueError(f"cannot truncate latent {basis.dim_latent} to {dim_latent}")
    enc = np.ascontiguousarray(basis.enc[:dim_latent])
    return replace(basis, dim_latent=dim_latent, enc=enc, dec=enc.copy())


def filter_grid_image(basis: PatchBasis) -> np.ndarray:
    """Render decoder rows as patch tiles in a near-square grid.

    Each row of dec is reshaped to (p, p, 3) and normalized to [-1, 1] by
    its own max magnitude (zero rows stay zero). Tiles are separated by
    one-pixel white gutters, order row-major by latent index.
    """
    p = basis.patch_size
    d = basis.dim_latent
    cols = int(np.ceil(np.sqrt(d)))
    rows = int(np.ceil(d / cols))
    side_h = rows * p + (rows - 1)
    side_w = cols * p + (cols - 1)
    canvas = np.ones((side_h, side_w, 3))
    for i in range(d):
        tile = basis.dec[i].reshape(p, p, 3)
        m = np.max(np.abs(tile))
        if m > 0:
            tile = tile / m
        r, c = divmod(i, cols)
        y, x = r * (p + 1), c * (p + 1)
        canvas[y : y + p, x : x + p] = tile
    return canvas
