"""Linear probing of frozen encoder features, plus the t and depth sweeps.

The probe standardizes features by training-split statistics (no learned
affine) and fits a linear softmax classifier with minibatch SGD under a
cosine-decayed learning rate. Encoders are never updated; features are
extracted once and reused.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import denoiser as dn
from .corruption import CorruptionConfig, latent_to_image
from .patches import extract_patches_batch
from .rng import child_rng
from .schedule import diffuse
from .tokenizer import encode

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class ProbeSettings:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 0.1
    seed: int = 0


@dataclass
class ProbeModel:
    mean: np.ndarray  # (F,)
    std: np.ndarray  # (F,), floored
    weight: np.ndarray  # (F, K)
    bias: np.ndarray  # (K,)


@dataclass
class ProbeReport:
    top1: float
    per_class: np.ndarray  # (K,) accuracy per true class
    n_eval: int
    config: dict


def fit_probe(
    features: np.ndarray, labels: np.ndarray, n_classes: int,
    settings: ProbeSettings = ProbeSettings(),
) -> ProbeModel:
    """Train a linear classifier on standardized frozen features."""
    n, f = features.shape
    if n < n_classes:
        raise ValueError(f"{n} examples for {n_classes} classes")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} for {n} examples")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("labels out of range")

    mean = features.mean(axis=0)
    var = features.var(axis=0)
    floored = var < VAR_FLOOR
    if floored.any():
        warnings.warn(
            f"{int(floored.sum())} feature dims have near-zero variance; floored",
            stacklevel=2,
        )
    std = np.sqrt(np.maximum(var, VAR_FLOOR))
    x = (features - mean) / std

    rng = child_rng(settings.seed, "probe")
    w = np.zeros((f, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[labels]

    bs = min(settings.batch_size, n)
    steps_per_epoch = (n + bs - 1) // bs
    total = settings.epochs * steps_per_epoch
    step = 0
    for _epoch in range(settings.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            xb, yb = x[idx], onehot[idx]
            logits = xb @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - yb) / idx.shape[0]
            lr = settings.lr * 0.5 * (1.0 + np.cos(np.pi * step / total))
            w -= lr * (xb.T @ g)
            b -= lr * g.sum(axis=0)
            step += 1
    return ProbeModel(mean=mean, std=std, weight=w, bias=b)


def evaluate_probe(
    model: ProbeModel, features: np.ndarray, labels: np.ndarray,
    config: dict | None = None,
) -> ProbeReport:
    """Accuracy of the frozen probe on held-out features."""
    if features.shape[0] == 0:
        raise ValueError("empty evaluation set")
    if features.shape[1] != model.mean.shape[0]:
        raise ValueError(
            f"feature dim {features.shape[1]} != probe dim {model.mean.shape[0]}"
        )
    x = (features - model.mean) / model.std
    pred = np.argmax(x @ model.weight + model.bias, axis=1)
    correct = pred == labels
    k = model.weight.shape[1]
    per_class = np.array([
        correct[labels == c].mean() if np.any(labels == c) else np.nan
        for c in range(k)
    ])
    return ProbeReport(
        top1=float(correct.mean()),
        per_class=per_class,
        n_eval=int(labels.shape[0]),
        config=dict(config or {}),
    )


def probe_inputs(
    cor: CorruptionConfig, images: np.ndarray, t: int, noisy: bool,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """Token inputs for feature extraction.

    Clean mode feeds the encoder's natural uncorrupted input: the raw
    pixel patches for image-input pipelines, the clean latents otherwise.
    Noisy mode runs the full corruption at fixed t.
    """
    pat = extract_patches_batch(images, cor.basis.patch_size)
    if not noisy:
        return pat if cor.image_input else encode(cor.basis, pat)
    if rng is None:
        raise ValueError("noisy feature extraction needs a generator")
    draw = diffuse(encode(cor.basis, pat), cor.schedule, t, rng)
    if cor.image_input:
        return latent_to_image(cor, draw.z_t, pat)
    return draw.z_t


def extract_features(
    params, config: dn.DenoiserConfig, cor: CorruptionConfig, images: np.ndarray,
    t: int, enc_blocks: int, noisy: bool = False,
    rng: np.random.Generator | None = None, batch_size: int = 64,
    hflip: bool = False,
) -> np.ndarray:
    """Pooled encoder features for every image, deterministic per rng.

    hflip extracts from mirrored images instead (probe-time augmentation
    doubles the training features by appending the flipped pass).
    """
    out = []
    src = images[:, :, ::-1] if hflip else images
    for start in range(0, images.shape[0], batch_size):
        x = probe_inputs(cor, src[start : start + batch_size], t, noisy, rng)
        out.append(dn.encoder_features(params, config, x, t, enc_blocks))
    return np.concatenate(out, axis=0)


def probe_encoder(
    params, config: dn.DenoiserConfig, cor: CorruptionConfig,
    train_images: np.ndarray, train_labels: np.ndarray,
    val_images: np.ndarray, val_labels: np.ndarray,
    n_classes: int, t: int, enc_blocks: int, noisy: bool = False,
    settings: ProbeSettings = ProbeSettings(), flip_augment: bool = True,
) -> ProbeReport:
    """Extract features, fit the probe on train, evaluate on val."""
    rng = child_rng(settings.seed, "probe-noise", t) if noisy else None
    feats = extract_features(
        params, config, cor, train_images, t, enc_blocks, noisy, rng
    )
    labels = train_labels
    if flip_augment:
        flipped = extract_features(
            params, config, cor, train_images, t, enc_blocks, noisy, rng, hflip=True
        )
        feats = np.concatenate([feats, flipped], axis=0)
        labels = np.concatenate([train_labels, train_labels])
    model = fit_probe(feats, labels, n_classes, settings)
    val_feats = extract_features(
        params, config, cor, val_images, t, enc_blocks, noisy, rng
    )
    report = evaluate_probe(
        model, val_feats, val_labels,
        {"t": t, "enc_blocks": enc_blocks, "noisy": noisy, "seed": settings.seed},
    )
    return report


def sweep_fixed_t(
    params, config, cor, train_images, train_labels, val_images, val_labels,
    n_classes: int, ts, enc_blocks: int, noisy: bool,
    settings: ProbeSettings = ProbeSettings(),
) -> list[tuple[int, bool, float]]:
    """One probe per fixed t; rows (t, noisy, top1)."""
    rows = []
    for t in ts:
        rep = probe_encoder(
            params, config, cor, train_images, train_labels, val_images,
            val_labels, n_classes, int(t), enc_blocks, noisy, settings,
        )
        rows.append((int(t), noisy, rep.top1))
    return rows


def sweep_encoder_depth(
    params, config, cor, train_images, train_labels, val_images, val_labels,
    n_classes: int, blocks, t: int,
    settings: ProbeSettings = ProbeSettings(),
) -> list[tuple[int, float]]:
    """One probe per encoder depth; rows (enc_blocks, top1)."""
    rows = []
    for nb in blocks:
        rep = probe_encoder(
            params, config, cor, train_images, train_labels, val_images,
            val_labels, n_classes, t, int(nb), settings=settings,
        )
        rows.append((int(nb), rep.top1))
    return rows
