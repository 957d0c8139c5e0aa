"""Denoiser pretraining loop.

Each step draws a batch of images, corrupts their latent tokens at
per-example random times, builds the configured input/target pair, and
takes one Adam step on the configured loss. The learning rate warms up
linearly from zero and then follows a half-cycle cosine; the effective
peak is base_lr * batch_size / 256, so configs transfer across batch
sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from . import image as image_mod
from .corruption import CorruptionConfig, latent_to_image
from .losses import LossSpec, loss_weight, weighted_mse, weighted_residual_loss
from .patches import extract_patches_batch
from .rng import child_rng
from .schedule import diffuse
from .tokenizer import PatchBasis, TrainingDiverged, decode, encode

AUGMENT_KINDS = ("none", "flip", "crop")


@dataclass(frozen=True)
class TrainTask:
    """What the denoiser is trained to do (spaces, schedule, loss)."""

    corruption: CorruptionConfig
    loss: LossSpec
    # complete square eigenbasis of the same PCA fit; required by the
    # original-image loss, unused otherwise
    basis_full: PatchBasis | None = None

    def __post_init__(self):
        if self.loss.target_kind == "predict_original_image":
            if not self.corruption.image_output:
                raise ValueError("predict_original_image requires an image-space output")
            bf = self.basis_full
            if bf is None or bf.enc_full is None:
                raise ValueError("predict_original_image needs the full PCA eigenbasis")

    @property
    def token_dim_in(self) -> int:
        b = self.corruption.basis
        return b.dim_full if self.corruption.image_input else b.dim_latent

    @property
    def token_dim_out(self) -> int:
        b = self.corruption.basis
        return b.dim_full if self.corruption.image_output else b.dim_latent


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 2e-3  # peak lr = base_lr * batch_size / 256
    warmup_epochs: float = 2.0
    seed: int = 0
    augment: str = "none"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs out of range")
        if self.augment not in AUGMENT_KINDS:
            raise ValueError(f"unknown augment kind {self.augment!r}")


@dataclass
class OptimizerState:
    """Adam with bias correction; weight decay intentionally zero."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8


def adam_init(params: dict[str, np.ndarray]) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    """One in-place Adam update; state.step counts completed updates."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup from zero, then half-cycle cosine to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak_lr
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def make_training_batch(
    task: TrainTask, images: np.ndarray, t: np.ndarray, rng: np.random.Generator
):
    """Corrupt a (B, H, W, 3) image batch into (inputs, targets, lambda).

    Inputs and targets are (B, tokens, channels) in the spaces the task
    dictates; lambda is the per-example loss weight at the drawn times.
    """
    cor = task.corruption
    basis = cor.basis
    pat = extract_patches_batch(images, basis.patch_size)
    z0 = encode(basis, pat)
    draw = diffuse(z0, cor.schedule, t, rng)

    if cor.image_input:
        x_in = latent_to_image(cor, draw.z_t, pat)
    else:
        x_in = draw.z_t

    kind = task.loss.target_kind
    if kind == "predict_noise":
        # in image space the noise maps through the decoder's linear part
        target = draw.eps @ basis.dec if cor.image_output else draw.eps
    elif kind == "predict_clean":
        target = decode(basis, draw.z0) if cor.image_output else draw.z0
    else:  # predict_original_image
        target = pat
    lam = loss_weight(cor.schedule, t, task.loss.weight_kind)
    return x_in, target, lam


def apply_loss(task: TrainTask, pred: np.ndarray, target: np.ndarray, lam):
    """Loss and gradient for the task's configured objective."""
    if task.loss.target_kind == "predict_original_image":
        bf = task.basis_full
        return weighted_residual_loss(
            pred, target, bf.enc_full, task.corruption.basis.dim_latent,
            lam, task.loss.residual_weight,
        )
    return weighted_mse(pred, target, lam)


def _augment(images: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "none":
        return images
    if kind == "flip":
        flip = rng.random(images.shape[0]) < 0.5
        out = images.copy()
        out[flip] = images[flip, :, ::-1]
        return out
    out = np.empty_like(images)
    for i in range(images.shape[0]):  # crop
        out[i] = image_mod.random_crop_resize(images[i], rng)
    return out


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0


def denoiser_config_for(task: TrainTask, tokens: int, width: int, depth: int,
                        heads: int = 4) -> dn.DenoiserConfig:
    """Model shape implied by a task's input/output spaces."""
    return dn.DenoiserConfig(
        token_dim_in=task.token_dim_in,
        token_dim_out=task.token_dim_out,
        tokens=tokens,
        width=width,
        depth=depth,
        heads=heads,
    )


def train(
    params: dict[str, np.ndarray],
    config: dn.DenoiserConfig,
    images: np.ndarray,
    task: TrainTask,
    settings: TrainSettings,
) -> TrainResult:
    """Train in place on (M, H, W, 3) images; returns params and loss curve.

    Fully deterministic for a given seed: epoch shuffles, drawn times,
    noise, and augmentation all come from one generator. Raises
    TrainingDiverged on a non-finite loss.
    """
    m = images.shape[0]
    if m < 1:
        raise ValueError("empty training set")
    rng = child_rng(settings.seed, "pretrain")
    bs = min(settings.batch_size, m)
    steps_per_epoch = (m + bs - 1) // bs
    total = settings.epochs * steps_per_epoch
    warmup = int(round(settings.warmup_epochs * steps_per_epoch))
    peak = settings.base_lr * bs / 256.0

    opt = adam_init(params)
    result = TrainResult(params=params)
    tmax = task.corruption.schedule.steps
    for _epoch in range(settings.epochs):
        order = rng.permutation(m)
        epoch_loss = 0.0
        for start in range(0, m, bs):
            idx = order[start : start + bs]
            batch = _augment(images[idx], settings.augment, rng)
            t = rng.integers(1, tmax + 1, size=idx.shape[0])
            x_in, target, lam = make_training_batch(task, batch, t, rng)
            pred, cache = dn.forward(params, config, x_in, t, want_cache=True)
            loss, dpred = apply_loss(task, pred, target, lam)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss {loss} at step {result.steps} (epoch {_epoch})"
                )
            grads = dn.backward(params, config, cache, dpred)
            adam_step(params, grads, opt, lr_at(result.steps, total, warmup, peak))
            result.steps += 1
            epoch_loss += loss * idx.shape[0]
        result.epoch_losses.append(epoch_loss / m)
    return result
