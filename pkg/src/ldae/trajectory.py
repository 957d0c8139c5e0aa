"""Experiment ladder from noise-prediction training to a plain denoiser.

Each rung changes one ingredient (target, weighting, schedule, input and
output spaces) and keeps everything else fixed, so the probe accuracies
line up into a single comparable trajectory. Rows carry a reference
accuracy from the corresponding full-scale configuration; those numbers
are annotations for orientation only and are never asserted, since desk
budgets sit far below them.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from . import denoiser as dn
from .corruption import CorruptionConfig, latent_to_image
from .data import DatasetManifest, load_split
from .image import psnr
from .kvconfig import Config
from .losses import LossSpec
from .manifest import RunManifest, load_run_manifest
from .patches import assemble_patches_batch, extract_patches_batch, patch_dim, sample_patches
from .probe import ProbeReport, ProbeSettings, probe_encoder
from .rng import child_rng
from .schedule import NoiseSchedule, diffuse, gamma_sigma
from .tokenizer import GdConfig, PatchBasis, encode, fit_basis, fit_pca, reconstruction_error
from .train import TrainSettings, TrainTask, denoiser_config_for, train


@dataclass(frozen=True)
class ExperimentSpec:
    """One pretraining configuration: tokenizer, corruption, objective."""

    name: str
    basis_kind: str = "pca"
    dim_latent: int = 16
    schedule_kind: str = "fixed_gamma"
    target_kind: str = "predict_clean"
    weight_kind: str = "inv_one_plus_sigma_sq"
    space: str = "latent_in_latent_out"
    residual_weight: float = 0.1
    # accuracy of the matching full-scale configuration, reported in the
    # trajectory CSV for orientation; desk runs are not expected to match
    reference_top1: str = ""


def ladder_rows(dim_latent: int = 16) -> tuple[ExperimentSpec, ...]:
    """The experiment ladder; each row keeps all earlier changes."""
    return (
        ExperimentSpec(
            "latent_noise_prediction", dim_latent=dim_latent,
            schedule_kind="linear_gamma_sq", target_kind="predict_noise",
            weight_kind="unit", reference_top1="63.4",
        ),
        ExperimentSpec(
            "clean_latent_target", dim_latent=dim_latent,
            schedule_kind="linear_gamma_sq", target_kind="predict_clean",
            weight_kind="gamma_sq", reference_top1="62.4",
        ),
        ExperimentSpec(
            "unit_input_scale", dim_latent=dim_latent,
            schedule_kind="fixed_gamma", target_kind="predict_clean",
            weight_kind="inv_one_plus_sigma_sq", reference_top1="63.6",
        ),
        ExperimentSpec(
            "image_space_input", dim_latent=dim_latent,
            schedule_kind="fixed_gamma", target_kind="predict_clean",
            weight_kind="inv_one_plus_sigma_sq", space="image_in_latent_out",
            reference_top1="63.6",
        ),
        ExperimentSpec(
            "image_space_output", dim_latent=dim_latent,
            schedule_kind="fixed_gamma", target_kind="predict_clean",
            weight_kind="inv_one_plus_sigma_sq", space="image_in_image_out",
            reference_top1="63.9",
        ),
        ExperimentSpec(
            "original_image_target", dim_latent=dim_latent,
            schedule_kind="fixed_gamma", target_kind="predict_original_image",
            weight_kind="inv_one_plus_sigma_sq", space="image_in_image_out",
            reference_top1="64.5",
        ),
        ExperimentSpec(
            "single_noise_level", dim_latent=dim_latent,
            schedule_kind="single_level", target_kind="predict_original_image",
            weight_kind="inv_one_plus_sigma_sq", space="image_in_image_out",
            reference_top1="61.5",
        ),
    )


def spec_from_config(cfg: Config, name: str = "configured") -> ExperimentSpec:
    """The single experiment described by the config sections."""
    return ExperimentSpec(
        name=name,
        basis_kind=cfg.get("tokenizer", "kind"),
        dim_latent=cfg.get_int("tokenizer", "dim_latent"),
        schedule_kind=cfg.get("schedule", "kind"),
        target_kind=cfg.get("loss", "target"),
        weight_kind=cfg.get("loss", "weight"),
        space=cfg.get("pipeline", "space"),
        residual_weight=cfg.get_float("loss", "residual_weight"),
    )


def schedule_from_config(cfg: Config, kind: str | None = None) -> NoiseSchedule:
    return NoiseSchedule(
        kind=kind if kind is not None else cfg.get("schedule", "kind"),
        steps=cfg.get_int("schedule", "steps"),
        beta_start=cfg.get_float("schedule", "beta_start"),
        beta_end=cfg.get_float("schedule", "beta_end"),
        sigma_max=cfg.get_float("schedule", "sigma_max"),
        sigma_const=cfg.get_float("schedule", "sigma_const"),
    )


def resolve_enc_blocks(cfg: Config, depth: int) -> int:
    """probe.enc_blocks, where "auto" means the first half of the stack."""
    raw = cfg.get("probe", "enc_blocks")
    nb = max(1, depth // 2) if raw == "auto" else int(raw)
    if not 1 <= nb <= depth:
        raise ValueError(f"enc_blocks {nb} outside [1, {depth}]")
    return nb


@dataclass
class DataBundle:
    train_images: np.ndarray  # (M, H, W, 3)
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    n_classes: int
    image_size: int


def load_bundle(manifest: DatasetManifest) -> DataBundle:
    tr_x, tr_y = load_split(manifest, "train")
    va_x, va_y = load_split(manifest, "val")
    return DataBundle(
        train_images=tr_x, train_labels=tr_y,
        val_images=va_x, val_labels=va_y,
        n_classes=manifest.n_classes, image_size=manifest.image_size,
    )


def fit_spec_basis(
    cfg: Config, spec: ExperimentSpec, images: np.ndarray, seed: int
) -> tuple[PatchBasis, PatchBasis | None]:
    """Fit the spec's tokenizer; also the full eigenbasis when the loss
    scores residuals (reused from the tokenizer itself when it has one)."""
    p = cfg.get_int("tokenizer", "patch_size")
    sample = sample_patches(
        images, p, cfg.get_int("tokenizer", "sample_patches"),
        child_rng(seed, "patch-sample"),
    )
    gd = GdConfig(
        steps=cfg.get_int("tokenizer", "gd_steps"),
        lr=cfg.get_float("tokenizer", "gd_lr"),
        seed=seed,
    )
    dim = patch_dim(p) if spec.basis_kind == "identity" else spec.dim_latent
    basis = fit_basis(
        spec.basis_kind, sample, dim, gd, cfg.get_float("tokenizer", "kl_weight")
    )
    basis_full = None
    if spec.target_kind == "predict_original_image":
        if basis.enc_full is not None:
            basis_full = basis
        else:
            basis_full = fit_pca(sample, min(basis.dim_latent, basis.dim_full))
    return basis, basis_full


def build_task(cfg: Config, spec: ExperimentSpec, basis: PatchBasis,
               basis_full: PatchBasis | None) -> TrainTask:
    cor = CorruptionConfig(
        basis=basis,
        schedule=schedule_from_config(cfg, spec.schedule_kind),
        space=spec.space,
        drop_orthogonal_complement=cfg.get_bool("pipeline", "drop_orthogonal_complement"),
    )
    loss = LossSpec(spec.target_kind, spec.weight_kind, spec.residual_weight)
    return TrainTask(corruption=cor, loss=loss, basis_full=basis_full)


def step_at_sigma(schedule: NoiseSchedule, sigma: float) -> int:
    """Smallest t in [1, steps] whose noise level is nearest sigma."""
    t = np.arange(1, schedule.steps + 1)
    _, s = gamma_sigma(schedule, t)
    return int(t[np.argmin(np.abs(s - sigma))])


def denoise_images(
    params, config: dn.DenoiserConfig, task: TrainTask, images: np.ndarray,
    t: int, rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt images at step t and denoise; returns (noisy, restored) images.

    The noisy panel is the decoded corruption (what the pipeline actually
    destroys); the restored panel is the model's clean estimate mapped
    back to image space.
    """
    cor = task.corruption
    basis = cor.basis
    kind = task.loss.target_kind
    if kind == "predict_noise" and cor.image_output:
        raise ValueError("noise prediction in image space has no clean estimate")
    b, h, w, _ = images.shape
    pat = extract_patches_batch(images, basis.patch_size)
    z0 = encode(basis, pat)
    draw = diffuse(z0, cor.schedule, int(t), rng)
    noisy_pat = latent_to_image(cor, draw.z_t, pat)
    x_in = noisy_pat if cor.image_input else draw.z_t
    pred, _ = dn.forward(params, config, x_in, int(t))
    if cor.image_output:
        restored_pat = pred
    else:
        if kind == "predict_noise":
            zhat = (draw.z_t - draw.sigma * pred) / draw.gamma
        else:
            zhat = pred
        restored_pat = latent_to_image(cor, zhat, pat)
    noisy = assemble_patches_batch(noisy_pat, h, w, basis.patch_size)
    restored = assemble_patches_batch(restored_pat, h, w, basis.patch_size)
    return noisy, restored


def denoising_gain(
    params, config: dn.DenoiserConfig, task: TrainTask, images: np.ndarray,
    t: int, seed: int,
) -> tuple[float, float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Mean PSNR of (restored, noisy) against the originals at step t.

    Also returns the first image's (clean, noisy, restored) panels for a
    side-by-side export.
    """
    rng = child_rng(seed, "denoise-eval", t)
    noisy, restored = denoise_images(params, config, task, images, t, rng)
    b = images.shape[0]
    p_model = float(np.mean([psnr(restored[i], images[i]) for i in range(b)]))
    p_noisy = float(np.mean([psnr(noisy[i], images[i]) for i in range(b)]))
    return p_model, p_noisy, (images[0], noisy[0], restored[0])


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    task: TrainTask
    config: dn.DenoiserConfig
    params: dict[str, np.ndarray]
    epoch_losses: list[float]
    recon_error: float
    report: ProbeReport
    floor_report: ProbeReport | None
    psnr_model: float
    psnr_noisy: float
    panels: tuple[np.ndarray, np.ndarray, np.ndarray] | None
    seconds: float = 0.0

    @property
    def top1(self) -> float:
        return self.report.top1

    @property
    def floor_top1(self) -> float:
        return self.floor_report.top1 if self.floor_report is not None else float("nan")

    @property
    def margin(self) -> float:
        return self.top1 - self.floor_top1

    @property
    def psnr_gain(self) -> float:
        return self.psnr_model - self.psnr_noisy


def run_experiment(
    cfg: Config, bundle: DataBundle, spec: ExperimentSpec,
    epochs: int | None = None, depth: int | None = None,
    with_floor: bool = True, max_psnr_images: int = 128,
) -> ExperimentResult:
    """Tokenizer fit, pretrain, probe, floor probe, denoising PSNR.

    epochs and depth default to the [train] and [denoiser] sections; the
    ladder and sweeps pass the reduced [trajectory] budget instead. The
    floor probe reads the same features from a freshly initialized model,
    which is the accuracy bar any pretraining has to clear.
    """
    t0 = time.monotonic()
    seed = cfg.get_int("run", "seed")
    if epochs is None:
        epochs = cfg.get_int("train", "epochs")
    if depth is None:
        depth = cfg.get_int("denoiser", "depth")

    basis, basis_full = fit_spec_basis(cfg, spec, bundle.train_images, seed)
    task = build_task(cfg, spec, basis, basis_full)
    val_pat = extract_patches_batch(bundle.val_images, basis.patch_size)
    recon = reconstruction_error(basis, val_pat.reshape(-1, basis.dim_full))

    p = basis.patch_size
    tokens = (bundle.image_size // p) ** 2
    config = denoiser_config_for(
        task, tokens, cfg.get_int("denoiser", "width"), depth,
        cfg.get_int("denoiser", "heads"),
    )
    params = dn.init_params(config, child_rng(seed, "init"))
    settings = TrainSettings(
        epochs=epochs,
        batch_size=cfg.get_int("train", "batch_size"),
        base_lr=cfg.get_float("train", "base_lr"),
        warmup_epochs=min(cfg.get_float("train", "warmup_epochs"), float(epochs)),
        seed=seed,
        augment=cfg.get("train", "augment"),
    )
    result = train(params, config, bundle.train_images, task, settings)

    probe_settings = ProbeSettings(
        epochs=cfg.get_int("probe", "epochs"),
        batch_size=cfg.get_int("probe", "batch_size"),
        lr=cfg.get_float("probe", "lr"),
        seed=seed,
    )
    t_fixed = cfg.get_int("probe", "t_fixed")
    enc_blocks = resolve_enc_blocks(cfg, depth)
    noisy = cfg.get_bool("probe", "noisy_input")
    flip = cfg.get_bool("probe", "flip_augment")
    report = probe_encoder(
        params, config, task.corruption,
        bundle.train_images, bundle.train_labels,
        bundle.val_images, bundle.val_labels,
        bundle.n_classes, t_fixed, enc_blocks, noisy, probe_settings, flip,
    )
    floor_report = None
    if with_floor:
        floor_params = dn.init_params(config, child_rng(seed, "floor"))
        floor_report = probe_encoder(
            floor_params, config, task.corruption,
            bundle.train_images, bundle.train_labels,
            bundle.val_images, bundle.val_labels,
            bundle.n_classes, t_fixed, enc_blocks, noisy, probe_settings, flip,
        )

    sched = task.corruption.schedule
    t_star = step_at_sigma(sched, sched.sigma_const)
    psnr_model, psnr_noisy, panels = denoising_gain(
        params, config, task, bundle.val_images[:max_psnr_images], t_star, seed
    )
    return ExperimentResult(
        spec=spec, task=task, config=config, params=params,
        epoch_losses=result.epoch_losses, recon_error=recon,
        report=report, floor_report=floor_report,
        psnr_model=psnr_model, psnr_noisy=psnr_noisy, panels=panels,
        seconds=time.monotonic() - t0,
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    """CSV with repr-formatted floats, so reruns compare byte for byte."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


TRAJECTORY_HEADER = [
    "row", "name", "status", "top1", "floor_top1", "margin",
    "psnr_model_db", "psnr_noisy_db", "psnr_gain_db",
    "final_loss", "recon_error", "reference_top1", "error",
]


@dataclass
class RowOutcome:
    index: int
    spec: ExperimentSpec
    result: ExperimentResult | None = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.result is not None

    def csv_row(self) -> list:
        nan = float("nan")
        r = self.result
        return [
            self.index, self.spec.name, "ok" if self.ok else "failed",
            r.top1 if r else nan,
            r.floor_top1 if r else nan,
            r.margin if r else nan,
            r.psnr_model if r else nan,
            r.psnr_noisy if r else nan,
            r.psnr_gain if r else nan,
            r.epoch_losses[-1] if r and r.epoch_losses else nan,
            r.recon_error if r else nan,
            self.spec.reference_top1,
            self.error,
        ]


def run_trajectory(
    cfg: Config, bundle: DataBundle, out_dir: str | None = None,
    save_checkpoints: bool = False, progress=None,
) -> list[RowOutcome]:
    """Run every ladder row; a failed row is recorded and the rest still run.

    When out_dir is set, writes trajectory.csv, bar-chart data, and one
    clean/noisy/restored strip per row.
    """
    from .corruption import export_panels
    from .denoiser import save_denoiser

    epochs = cfg.get_int("trajectory", "epochs")
    depth = cfg.get_int("trajectory", "depth")
    outcomes = []
    for i, spec in enumerate(ladder_rows(cfg.get_int("tokenizer", "dim_latent")), start=1):
        if progress is not None:
            progress(f"row {i}/7 {spec.name}")
        outcome = RowOutcome(index=i, spec=spec)
        try:
            outcome.result = run_experiment(cfg, bundle, spec, epochs, depth)
        except Exception as exc:  # record and keep going
            outcome.error = f"{type(exc).__name__}: {exc}"
        outcomes.append(outcome)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(
            os.path.join(out_dir, "trajectory.csv"),
            TRAJECTORY_HEADER, [o.csv_row() for o in outcomes],
        )
        bars = [
            [o.spec.name, o.result.top1 if o.ok else float("nan"),
             o.result.floor_top1 if o.ok else float("nan")]
            for o in outcomes
        ]
        write_csv(
            os.path.join(out_dir, "trajectory_bars.csv"),
            ["name", "top1", "floor_top1"], bars,
        )
        for o in outcomes:
            if not o.ok or o.result.panels is None:
                continue
            export_panels(
                os.path.join(out_dir, f"row{o.index}_{o.spec.name}.ppm"),
                list(o.result.panels),
            )
            if save_checkpoints:
                save_denoiser(
                    os.path.join(out_dir, f"row{o.index}_{o.spec.name}.ldae"),
                    o.result.config, o.result.params,
                )
    return outcomes


SWEEP_HEADER = ["kind", "dim_latent", "recon_error", "top1", "psnr_gain_db", "status", "error"]


def run_tokenizer_sweep(
    cfg: Config, bundle: DataBundle, out_dir: str | None = None, progress=None,
) -> list[list]:
    """Probe accuracy per tokenizer kind and latent size, reduced budget.

    The identity kind only exists at the full patch dimension, so it runs
    once regardless of the configured latent sizes. Rows mirror the CSV.
    """
    epochs = cfg.get_int("trajectory", "epochs")
    depth = cfg.get_int("trajectory", "depth")
    dims = cfg.get_int_list("sweep", "latent_dims")
    kinds = cfg.get_str_list("sweep", "tokenizer_kinds")
    full = patch_dim(cfg.get_int("tokenizer", "patch_size"))
    rows = []
    for kind in kinds:
        for d in [full] if kind == "identity" else dims:
            if progress is not None:
                progress(f"tokenizer {kind} d={d}")
            spec = spec_from_config(cfg, name=f"{kind}_d{d}")
            spec = ExperimentSpec(
                name=spec.name, basis_kind=kind, dim_latent=d,
                schedule_kind=spec.schedule_kind, target_kind=spec.target_kind,
                weight_kind=spec.weight_kind, space=spec.space,
                residual_weight=spec.residual_weight,
            )
            try:
                res = run_experiment(cfg, bundle, spec, epochs, depth, with_floor=False)
                rows.append([kind, d, res.recon_error, res.top1, res.psnr_gain, "ok", ""])
            except Exception as exc:
                nan = float("nan")
                rows.append([kind, d, nan, nan, nan, "failed", f"{type(exc).__name__}: {exc}"])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "sweep_tokenizer.csv"), SWEEP_HEADER, rows)
    return rows


def _scan_schema_versions(paths: list[str]) -> None:
    """Reject mixed manifest schemas up front, naming every version seen."""
    seen = {}
    for path in paths:
        version = None
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("schema_version"):
                    _, _, val = line.partition("=")
                    version = val.strip()
                    break
        seen.setdefault(version, []).append(os.path.basename(path))
    if len(seen) > 1:
        parts = ", ".join(f"{v} ({', '.join(names)})" for v, names in sorted(seen.items(), key=str))
        raise ValueError(f"manifests disagree on schema_version: {parts}")


def export_report(
    manifest_paths: list[str], csv_path: str, md_path: str | None = None,
) -> list[RunManifest]:
    """Merge run manifests into one CSV (and optional markdown) table.

    Rows sort by (command, seed); metric columns are the sorted union
    over all runs, blank where a run lacks the metric.
    """
    if not manifest_paths:
        raise ValueError("no manifests to report")
    _scan_schema_versions(manifest_paths)
    runs = [load_run_manifest(p) for p in manifest_paths]
    runs.sort(key=lambda r: (r.command, r.seed))
    metric_keys = sorted({k for r in runs for k in r.metrics})
    header = ["command", "seed", "version", "schema_version"] + metric_keys
    rows = []
    for r in runs:
        rows.append(
            [r.command, r.seed, r.version, r.schema_version]
            + [r.metrics.get(k, "") for k in metric_keys]
        )
    write_csv(csv_path, header, rows)
    if md_path is not None:
        lines = ["| " + " | ".join(header) + " |",
                 "| " + " | ".join("---" for _ in header) + " |"]
        for row in rows:
            lines.append("| " + " | ".join(_fmt(v) for v in row) + " |")
        with open(md_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return runs
