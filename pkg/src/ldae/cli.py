"""Command line entry point.

Every command is hermetic: it loads (or synthesizes) the dataset named by
the config, builds whatever artifacts it needs, and writes its outputs
plus a run manifest under the output directory. Exit status is 0 only
when every step of the command succeeded.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from . import denoiser as dn
from .corruption import CorruptionConfig, corrupt_image, export_panels
from .data import MANIFEST_NAME, ingest_dataset, load_manifest, synth_dataset
from .kvconfig import Config, apply_overrides, load_config
from .manifest import RunManifest, code_version, save_run_manifest
from .patches import extract_patches_batch
from .probe import ProbeSettings, probe_encoder, sweep_encoder_depth, sweep_fixed_t
from .rng import child_rng
from .schedule import schedule_table
from .tokenizer import filter_grid_image, load_basis, reconstruction_error, save_basis
from .trajectory import (
    export_report,
    fit_spec_basis,
    load_bundle,
    resolve_enc_blocks,
    run_experiment,
    run_tokenizer_sweep,
    run_trajectory,
    schedule_from_config,
    spec_from_config,
    write_csv,
)


def _say(msg: str) -> None:
    print(msg, flush=True)


def _out_dir(cfg: Config) -> str:
    out = cfg.get("run", "out")
    os.makedirs(out, exist_ok=True)
    return out


def _ensure_dataset(cfg: Config):
    """Load the dataset at data.root, synthesizing it first if absent."""
    root = cfg.get("data", "root")
    if not os.path.exists(os.path.join(root, MANIFEST_NAME)):
        _say(f"no dataset at {root}, synthesizing")
        synth_dataset(
            root,
            n_classes=cfg.get_int("data", "classes"),
            size=cfg.get_int("data", "size"),
            per_class=cfg.get_int("data", "per_class"),
            seed=cfg.get_int("data", "seed"),
            val_frac=cfg.get_float("data", "val_frac"),
        )
    return load_manifest(root)


def _new_run(cfg: Config, command: str) -> RunManifest:
    return RunManifest(
        command=command,
        seed=cfg.get_int("run", "seed"),
        config=cfg.flat(),
        version=code_version(),
    )


def _finish_run(cfg: Config, run: RunManifest, started: float) -> str:
    run.set_timing("total", time.monotonic() - started)
    path = os.path.join(_out_dir(cfg), f"run_{run.command}.txt")
    save_run_manifest(path, run)
    return path


def cmd_synth(cfg: Config, args) -> int:
    t0 = time.monotonic()
    root = cfg.get("data", "root")
    if os.path.exists(os.path.join(root, MANIFEST_NAME)) and not args.force:
        _say(f"dataset already present at {root} (use --force to regenerate)")
        return 0
    manifest = synth_dataset(
        root,
        n_classes=cfg.get_int("data", "classes"),
        size=cfg.get_int("data", "size"),
        per_class=cfg.get_int("data", "per_class"),
        seed=cfg.get_int("data", "seed"),
        val_frac=cfg.get_float("data", "val_frac"),
    )
    run = _new_run(cfg, "synth")
    run.set_metric("images", len(manifest.files))
    run.set_metric("classes", manifest.n_classes)
    run.set_metric("train", len(manifest.train_idx))
    run.set_metric("val", len(manifest.val_idx))
    run.set_metric("checksum", manifest.checksum)
    run.artifacts.append(os.path.join(root, MANIFEST_NAME))
    _finish_run(cfg, run, t0)
    _say(
        f"wrote {len(manifest.files)} images ({len(manifest.train_idx)} train, "
        f"{len(manifest.val_idx)} val) to {root}"
    )
    return 0


def cmd_ingest(cfg: Config, args) -> int:
    t0 = time.monotonic()
    manifest = ingest_dataset(
        args.src,
        labels_file=args.labels,
        seed=cfg.get_int("data", "seed"),
        val_frac=cfg.get_float("data", "val_frac"),
    )
    run = _new_run(cfg, "ingest")
    run.set_metric("images", len(manifest.files))
    run.set_metric("classes", manifest.n_classes)
    run.set_metric("image_size", manifest.image_size)
    run.set_metric("checksum", manifest.checksum)
    run.artifacts.append(os.path.join(args.src, MANIFEST_NAME))
    _finish_run(cfg, run, t0)
    _say(
        f"ingested {len(manifest.files)} images of {manifest.n_classes} classes "
        f"at {manifest.image_size}x{manifest.image_size} from {args.src}"
    )
    return 0


def cmd_fit_tokenizer(cfg: Config, args) -> int:
    t0 = time.monotonic()
    dataset = _ensure_dataset(cfg)
    bundle = load_bundle(dataset)
    spec = spec_from_config(cfg)
    seed = cfg.get_int("run", "seed")
    basis, _ = fit_spec_basis(cfg, spec, bundle.train_images, seed)
    val_pat = extract_patches_batch(bundle.val_images, basis.patch_size)
    recon = reconstruction_error(basis, val_pat.reshape(-1, basis.dim_full))

    out = _out_dir(cfg)
    basis_path = os.path.join(out, "basis.ldae")
    save_basis(basis_path, basis)
    filters_path = os.path.join(out, "filters.ppm")
    export_panels(filters_path, [filter_grid_image(basis)], gutter=0)

    run = _new_run(cfg, "fit-tokenizer")
    run.set_metric("kind", basis.kind)
    run.set_metric("dim_latent", basis.dim_latent)
    run.set_metric("recon_error", recon)
    run.artifacts += [basis_path, filters_path]
    _finish_run(cfg, run, t0)
    _say(f"fit {basis.kind} d={basis.dim_latent}, held-out recon error {recon:.6f}")
    return 0


def _record_experiment(run: RunManifest, res) -> None:
    run.set_metric("top1", res.top1)
    if res.floor_report is not None:
        run.set_metric("floor_top1", res.floor_top1)
        run.set_metric("margin", res.margin)
    run.set_metric("psnr_model_db", res.psnr_model)
    run.set_metric("psnr_noisy_db", res.psnr_noisy)
    run.set_metric("psnr_gain_db", res.psnr_gain)
    run.set_metric("final_loss", res.epoch_losses[-1])
    run.set_metric("recon_error", res.recon_error)
    run.set_metric("params", dn.count_params(res.params))


def cmd_pretrain(cfg: Config, args) -> int:
    t0 = time.monotonic()
    bundle = load_bundle(_ensure_dataset(cfg))
    spec = spec_from_config(cfg, name="pretrain")
    _say(
        f"pretraining {spec.space} / {spec.target_kind} / {spec.schedule_kind} "
        f"({cfg.get('train', 'epochs')} epochs)"
    )
    res = run_experiment(cfg, bundle, spec)

    out = _out_dir(cfg)
    denoiser_path = os.path.join(out, "denoiser.ldae")
    dn.save_denoiser(denoiser_path, res.config, res.params)
    basis_path = os.path.join(out, "basis.ldae")
    save_basis(basis_path, res.task.corruption.basis)
    curve_path = os.path.join(out, "loss_curve.csv")
    write_csv(
        curve_path, ["epoch", "loss"],
        [[i + 1, v] for i, v in enumerate(res.epoch_losses)],
    )
    panels_path = os.path.join(out, "denoise_panels.ppm")
    if res.panels is not None:
        export_panels(panels_path, list(res.panels))

    run = _new_run(cfg, "pretrain")
    _record_experiment(run, res)
    run.artifacts += [denoiser_path, basis_path, curve_path, panels_path]
    _finish_run(cfg, run, t0)
    _say(
        f"probe top-1 {res.top1:.4f} (random-init floor {res.floor_top1:.4f}), "
        f"denoise gain {res.psnr_gain:+.2f} dB"
    )
    return 0


def _load_model(cfg: Config, args):
    out = cfg.get("run", "out")
    denoiser_path = args.denoiser or os.path.join(out, "denoiser.ldae")
    basis_path = args.basis or os.path.join(out, "basis.ldae")
    config, params = dn.load_denoiser(denoiser_path)
    basis = load_basis(basis_path)
    cor = CorruptionConfig(
        basis=basis,
        schedule=schedule_from_config(cfg),
        space=cfg.get("pipeline", "space"),
        drop_orthogonal_complement=cfg.get_bool("pipeline", "drop_orthogonal_complement"),
    )
    return config, params, cor


def _probe_settings(cfg: Config) -> ProbeSettings:
    return ProbeSettings(
        epochs=cfg.get_int("probe", "epochs"),
        batch_size=cfg.get_int("probe", "batch_size"),
        lr=cfg.get_float("probe", "lr"),
        seed=cfg.get_int("run", "seed"),
    )


def cmd_probe(cfg: Config, args) -> int:
    t0 = time.monotonic()
    bundle = load_bundle(_ensure_dataset(cfg))
    config, params, cor = _load_model(cfg, args)
    report = probe_encoder(
        params, config, cor,
        bundle.train_images, bundle.train_labels,
        bundle.val_images, bundle.val_labels,
        bundle.n_classes,
        cfg.get_int("probe", "t_fixed"),
        resolve_enc_blocks(cfg, config.depth),
        cfg.get_bool("probe", "noisy_input"),
        _probe_settings(cfg),
        cfg.get_bool("probe", "flip_augment"),
    )
    out = _out_dir(cfg)
    report_path = os.path.join(out, "probe_report.csv")
    write_csv(
        report_path, ["class", "top1"],
        [["all", report.top1]] + [[i, v] for i, v in enumerate(report.per_class)],
    )
    run = _new_run(cfg, "probe")
    run.set_metric("top1", report.top1)
    run.set_metric("n_eval", report.n_eval)
    run.artifacts.append(report_path)
    _finish_run(cfg, run, t0)
    _say(f"probe top-1 {report.top1:.4f} on {report.n_eval} held-out images")
    return 0


def cmd_sweep_t(cfg: Config, args) -> int:
    t0 = time.monotonic()
    bundle = load_bundle(_ensure_dataset(cfg))
    config, params, cor = _load_model(cfg, args)
    ts = cfg.get_int_list("sweep", "ts")
    rows = sweep_fixed_t(
        params, config, cor,
        bundle.train_images, bundle.train_labels,
        bundle.val_images, bundle.val_labels,
        bundle.n_classes, ts,
        resolve_enc_blocks(cfg, config.depth),
        cfg.get_bool("probe", "noisy_input"),
        _probe_settings(cfg),
    )
    out = _out_dir(cfg)
    path = os.path.join(out, "sweep_t.csv")
    write_csv(path, ["t", "noisy", "top1"], [list(r) for r in rows])
    run = _new_run(cfg, "sweep-t")
    for t, _noisy, top1 in rows:
        run.set_metric(f"top1_t{t}", top1)
    run.artifacts.append(path)
    _finish_run(cfg, run, t0)
    best = max(rows, key=lambda r: r[2])
    _say(f"swept t={ts}; best top-1 {best[2]:.4f} at t={best[0]}")
    return 0


def cmd_sweep_depth(cfg: Config, args) -> int:
    t0 = time.monotonic()
    bundle = load_bundle(_ensure_dataset(cfg))
    config, params, cor = _load_model(cfg, args)
    blocks = list(range(1, config.depth + 1))
    rows = sweep_encoder_depth(
        params, config, cor,
        bundle.train_images, bundle.train_labels,
        bundle.val_images, bundle.val_labels,
        bundle.n_classes, blocks,
        cfg.get_int("probe", "t_fixed"),
        _probe_settings(cfg),
    )
    out = _out_dir(cfg)
    path = os.path.join(out, "sweep_depth.csv")
    write_csv(path, ["enc_blocks", "top1"], [list(r) for r in rows])
    run = _new_run(cfg, "sweep-depth")
    for nb, top1 in rows:
        run.set_metric(f"top1_blocks{nb}", top1)
    run.artifacts.append(path)
    _finish_run(cfg, run, t0)
    best = max(rows, key=lambda r: r[1])
    _say(f"swept encoder depth 1..{config.depth}; best top-1 {best[1]:.4f} at {best[0]} blocks")
    return 0


def cmd_sweep_tokenizer(cfg: Config, args) -> int:
    t0 = time.monotonic()
    bundle = load_bundle(_ensure_dataset(cfg))
    out = _out_dir(cfg)
    rows = run_tokenizer_sweep(cfg, bundle, out, progress=_say)
    run = _new_run(cfg, "sweep-tokenizer")
    failed = 0
    for kind, d, _recon, top1, _gain, status, _err in rows:
        if status == "ok":
            run.set_metric(f"top1_{kind}_d{d}", float(top1))
        else:
            failed += 1
    run.artifacts.append(os.path.join(out, "sweep_tokenizer.csv"))
    _finish_run(cfg, run, t0)
    ok_rows = [r for r in rows if r[5] == "ok"]
    if ok_rows:
        best = max(ok_rows, key=lambda r: r[3])
        _say(f"best tokenizer {best[0]} d={best[1]} with top-1 {float(best[3]):.4f}")
    if failed:
        _say(f"{failed} sweep cell(s) failed; see sweep_tokenizer.csv")
        return 1
    return 0


def cmd_trajectory(cfg: Config, args) -> int:
    t0 = time.monotonic()
    bundle = load_bundle(_ensure_dataset(cfg))
    out = _out_dir(cfg)
    outcomes = run_trajectory(cfg, bundle, out, save_checkpoints=args.checkpoints, progress=_say)
    run = _new_run(cfg, "trajectory")
    for o in outcomes:
        if o.ok:
            run.set_metric(f"row{o.index}_top1", o.result.top1)
            run.set_metric(f"row{o.index}_floor", o.result.floor_top1)
        else:
            run.set_metric(f"row{o.index}_error", o.error)
    run.artifacts += [
        os.path.join(out, "trajectory.csv"),
        os.path.join(out, "trajectory_bars.csv"),
    ]
    _finish_run(cfg, run, t0)
    for o in outcomes:
        if o.ok:
            _say(
                f"row {o.index} {o.spec.name}: top-1 {o.result.top1:.4f} "
                f"(floor {o.result.floor_top1:.4f}, reference {o.spec.reference_top1})"
            )
        else:
            _say(f"row {o.index} {o.spec.name}: FAILED ({o.error})")
    failed = [o for o in outcomes if not o.ok]
    return 1 if failed else 0


def cmd_visualize(cfg: Config, args) -> int:
    t0 = time.monotonic()
    bundle = load_bundle(_ensure_dataset(cfg))
    seed = cfg.get_int("run", "seed")
    out = _out_dir(cfg)
    spec = spec_from_config(cfg)
    basis, _ = fit_spec_basis(cfg, spec, bundle.train_images, seed)

    filters_path = os.path.join(out, "filters.ppm")
    export_panels(filters_path, [filter_grid_image(basis)], gutter=0)

    sched = schedule_from_config(cfg)
    table = schedule_table(sched)
    table_path = os.path.join(out, "schedule.csv")
    write_csv(
        table_path, ["t", "gamma_sq", "sigma_sq"],
        [[int(r[0]), float(r[1]), float(r[2])] for r in table],
    )

    cor = CorruptionConfig(
        basis=basis,
        schedule=sched,
        space=cfg.get("pipeline", "space"),
        drop_orthogonal_complement=cfg.get_bool("pipeline", "drop_orthogonal_complement"),
    )
    img = bundle.val_images[0]
    steps = sched.steps
    ts = [steps // 10, steps // 4, steps // 2, (3 * steps) // 4, steps]
    panels = [img]
    for t in ts:
        noisy, _draw = corrupt_image(img, cor, t, child_rng(seed, "viz", t))
        panels.append(noisy)
    strip_path = os.path.join(out, "corruption_strip.ppm")
    export_panels(strip_path, panels)

    run = _new_run(cfg, "visualize")
    run.artifacts += [filters_path, table_path, strip_path]
    _finish_run(cfg, run, t0)
    _say(f"wrote {filters_path}, {table_path}, {strip_path}")
    return 0


def cmd_report(cfg: Config, args) -> int:
    out = _out_dir(cfg)
    if args.manifests:
        paths = args.manifests
    else:
        paths = sorted(
            os.path.join(out, f) for f in os.listdir(out)
            if f.startswith("run_") and f.endswith(".txt")
        )
    if not paths:
        _say(f"no run manifests found under {out}")
        return 1
    csv_path = os.path.join(out, "report.csv")
    md_path = os.path.join(out, "report.md")
    runs = export_report(paths, csv_path, md_path)
    _say(f"merged {len(runs)} run manifest(s) into {csv_path} and {md_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ldae",
        description="Latent-noise denoising pretraining and probing at desk scale.",
    )
    parser.add_argument("--config", help="key=value config file (INI sections)")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--out", help="override run.out output directory")
    parser.add_argument(
        "--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override any config value (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic shape dataset")
    p.add_argument("--force", action="store_true", help="regenerate even if present")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate an external image folder")
    p.add_argument("--src", required=True, help="directory with images and labels.csv")
    p.add_argument("--labels", help="labels csv (default SRC/labels.csv)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit-tokenizer", help="fit the patch tokenizer and export filters")
    p.set_defaults(func=cmd_fit_tokenizer)

    p = sub.add_parser("pretrain", help="train the denoiser and probe it")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="probe a saved denoiser checkpoint")
    p.add_argument("--denoiser", help="checkpoint path (default OUT/denoiser.ldae)")
    p.add_argument("--basis", help="tokenizer path (default OUT/basis.ldae)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep-t", help="probe a checkpoint across noise levels")
    p.add_argument("--denoiser", help="checkpoint path (default OUT/denoiser.ldae)")
    p.add_argument("--basis", help="tokenizer path (default OUT/basis.ldae)")
    p.set_defaults(func=cmd_sweep_t)

    p = sub.add_parser("sweep-depth", help="probe a checkpoint at each encoder depth")
    p.add_argument("--denoiser", help="checkpoint path (default OUT/denoiser.ldae)")
    p.add_argument("--basis", help="tokenizer path (default OUT/basis.ldae)")
    p.set_defaults(func=cmd_sweep_depth)

    p = sub.add_parser("sweep-tokenizer", help="pretrain across tokenizer kinds and sizes")
    p.set_defaults(func=cmd_sweep_tokenizer)

    p = sub.add_parser("trajectory", help="run the full experiment ladder")
    p.add_argument("--checkpoints", action="store_true", help="save per-row checkpoints")
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("visualize", help="export tokenizer filters, schedule, corruption strip")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("report", help="merge run manifests into one table")
    p.add_argument("manifests", nargs="*", help="manifest files (default OUT/run_*.txt)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.set("run", "seed", str(args.seed))
        if args.out is not None:
            cfg.set("run", "out", args.out)
        apply_overrides(cfg, args.override)
        return args.func(cfg, args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
