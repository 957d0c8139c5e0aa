"""Training targets, per-time loss weights, and loss gradients.

The denoiser can regress three targets:

  predict_noise           the drawn eps
  predict_clean           the clean tokens z0
  predict_original_image  the clean pixel patches, scored in the full
                          patch eigenbasis with weight 1 on the leading
                          dim_latent coordinates and a small weight on
                          the rest

Per-example scalar weights lambda_t modulate how much each drawn time
contributes:

  snr                   gamma^2 / sigma^2
  gamma_sq              gamma^2
  inv_one_plus_sigma_sq 1 / (1 + sigma^2)
  unit                  1

Losses are means over every tensor entry, scaled by lambda_t per example
and averaged over the batch; each returns (loss, d loss / d pred) so the
trainer can backpropagate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule, gamma_sigma

TARGET_KINDS = ("predict_noise", "predict_clean", "predict_original_image")
WEIGHT_KINDS = ("snr", "gamma_sq", "inv_one_plus_sigma_sq", "unit")


@dataclass(frozen=True)
class LossSpec:
    target_kind: str
    weight_kind: str = "unit"
    # weight on the non-latent eigendirections for predict_original_image
    residual_weight: float = 0.1

    def __post_init__(self):
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.target_kind!r}")
        if self.weight_kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight kind {self.weight_kind!r}")
        if self.residual_weight < 0:
            raise ValueError(f"residual weight must be >= 0")


def loss_weight(schedule: NoiseSchedule, t, weight_kind: str) -> np.ndarray:
    """Per-example lambda_t; t scalar or (B,) ints."""
    gamma, sigma = gamma_sigma(schedule, t)
    if weight_kind == "snr":
        ssq = sigma**2
        if np.any(ssq == 0.0):
            raise ValueError("snr weight undefined where sigma = 0 (t = 0)")
        return gamma**2 / ssq
    if weight_kind == "gamma_sq":
        return gamma**2
    if weight_kind == "inv_one_plus_sigma_sq":
        return 1.0 / (1.0 + sigma**2)
    if weight_kind == "unit":
        return np.ones_like(gamma)
    raise ValueError(f"unknown weight kind {weight_kind!r}")


def _per_example_lam(lam, batch: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 0:
        return np.full(batch, float(lam))
    if lam.shape != (batch,):
        raise ValueError(f"lambda shape {lam.shape} for batch {batch}")
    return lam


def weighted_mse(pred: np.ndarray, target: np.ndarray, lam) -> tuple[float, np.ndarray]:
    """Mean over entries of lambda_t * (pred - target)^2, batch-averaged.

    pred and target are (B, ...); lam is scalar or (B,). Returns the loss
    and its gradient with respect to pred.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    b = pred.shape[0]
    lam = _per_example_lam(lam, b)
    diff = pred - target
    per_entry = diff.reshape(b, -1)
    n = per_entry.shape[1]
    per_example = np.sum(per_entry * per_entry, axis=1) / n
    loss = float(np.mean(lam * per_example))
    dpred = (2.0 / (b * n)) * lam.reshape((b,) + (1,) * (pred.ndim - 1)) * diff
    return loss, dpred


def _check_orthonormal(basis_full: np.ndarray) -> None:
    d = basis_full.shape[0]
    if basis_full.shape != (d, d):
        raise ValueError(f"full basis must be square, got {basis_full.shape}")
    err = np.max(np.abs(basis_full @ basis_full.T - np.eye(d)))
    if err > 1e-6:
        raise ValueError(f"full basis not orthonormal: max deviation {err:.3e}")


def dual_weight_vector(dim_full: int, dim_latent: int, residual_weight: float) -> np.ndarray:
    """Per-coordinate weights in the eigenbasis: 1 up to dim_latent, then less."""
    if not (1 <= dim_latent <= dim_full):
        raise ValueError(f"latent size {dim_latent} out of range [1, {dim_full}]")
    w = np.full(dim_full, residual_weight)
    w[:dim_latent] = 1.0
    return w


def weighted_residual_loss(
    pred: np.ndarray,
    x0: np.ndarray,
    basis_full: np.ndarray,
    dim_latent: int,
    lam,
    residual_weight: float,
) -> tuple[float, np.ndarray]:
    """Full-image regression loss scored in the complete patch eigenbasis.

    pred and x0 are (B, N, D) pixel-patch tensors. The residual x0 - pred
    is rotated by the orthonormal basis (rows = directions); coordinates
    the tokenizer keeps get weight 1, the discarded complement gets
    residual_weight. With residual_weight = 1 this equals weighted_mse
    exactly, because the rotation preserves the squared norm.
    """
    if pred.shape != x0.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {x0.shape}")
    if pred.ndim != 3:
        raise ValueError(f"expected (B, N, D) patches, got {pred.shape}")
    _check_orthonormal(basis_full)
    b, n_tok, d_full = pred.shape
    if basis_full.shape[0] != d_full:
        raise ValueError(f"basis dim {basis_full.shape[0]}, patches have {d_full}")
    lam = _per_example_lam(lam, b)
    w = dual_weight_vector(d_full, dim_latent, residual_weight)

    r = (x0 - pred) @ basis_full.T  # rotated residual, (B, N, D)
    n = n_tok * d_full
    per_example = np.sum((r * r) @ w, axis=1) / n
    loss = float(np.mean(lam * per_example))
    # d loss / d r = 2 lam w r / (B n); d r / d pred = -basis
    dr = (2.0 / (b * n)) * lam[:, None, None] * (w * r)
    dpred = -(dr @ basis_full)
    return loss, dpred


def make_target(
    spec: LossSpec, z0: np.ndarray, eps: np.ndarray, x0_patches: np.ndarray | None
) -> np.ndarray:
    """The regression target in the space the network predicts."""
    if spec.target_kind == "predict_noise":
        return eps
    if spec.target_kind == "predict_clean":
        return z0
    if x0_patches is None:
        raise ValueError("predict_original_image needs the clean pixel patches")
    return x0_patches
