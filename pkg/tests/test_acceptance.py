"""System acceptance: eleven checks, one visible pass/fail line each.

Run `pytest tests/test_acceptance.py -v -s` to see the lines as they
complete. The expensive stages (full pretrain, the experiment ladder,
the tokenizer sweep) are session fixtures shared across checks; the
whole file takes roughly 45 minutes on one CPU core.
"""

import math
import time

import numpy as np
import pytest

import ldae.denoiser as dn
from ldae.corruption import CorruptionConfig
from ldae.data import synth_dataset
from ldae.image import psnr, read_ppm, write_ppm
from ldae.kvconfig import load_config
from ldae.losses import LossSpec, loss_weight, weighted_mse, weighted_residual_loss
from ldae.patches import extract_patches_batch, sample_patches
from ldae.rng import child_rng
from ldae.schedule import NoiseSchedule, gamma_sigma
from ldae.tokenizer import (
    GdConfig,
    decode,
    encode,
    fit_basis,
    fit_pca,
    load_basis,
    save_basis,
)
from ldae.train import TrainTask, apply_loss, make_training_batch
from ldae.trajectory import (
    load_bundle,
    run_experiment,
    run_tokenizer_sweep,
    run_trajectory,
    spec_from_config,
)


def check(number: int, description: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {description} ({detail})"
    print("\n" + line, flush=True)
    assert ok, line


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def dataset(workdir):
    cfg = load_config()
    t0 = time.monotonic()
    manifest = synth_dataset(
        str(workdir / "dataset"),
        n_classes=cfg.get_int("data", "classes"),
        size=cfg.get_int("data", "size"),
        per_class=cfg.get_int("data", "per_class"),
        seed=cfg.get_int("data", "seed"),
        val_frac=cfg.get_float("data", "val_frac"),
    )
    return load_bundle(manifest), time.monotonic() - t0


@pytest.fixture(scope="session")
def patch_sample(dataset):
    bundle, _ = dataset
    return sample_patches(bundle.train_images, 4, 65536, child_rng(0, "accept-pca"))


@pytest.fixture(scope="session")
def pretrained(dataset):
    """The full-budget pretrain that criteria 7 and 9 score."""
    bundle, _ = dataset
    cfg = load_config()
    return run_experiment(cfg, bundle, spec_from_config(cfg))


@pytest.fixture(scope="session")
def ladder(dataset, workdir):
    """All seven rows at the reduced ladder budget."""
    bundle, _ = dataset
    out = workdir / "trajectory"
    outcomes = run_trajectory(load_config(), bundle, str(out))
    return outcomes, out


@pytest.fixture(scope="session")
def tokenizer_sweep(dataset):
    """PCA at d in {4, 8, 16} against the identity tokenizer at d = D."""
    bundle, _ = dataset
    cfg = load_config()
    cfg.set("sweep", "tokenizer_kinds", "pca,identity")
    cfg.set("sweep", "latent_dims", "4,8,16")
    return run_tokenizer_sweep(cfg, bundle)


def test_c01_pca_orthonormality(patch_sample):
    t0 = time.monotonic()
    worst = 0.0
    for d in (4, 8, 16, 48):
        basis = fit_pca(patch_sample, d)
        v = basis.enc
        worst = max(worst, float(np.max(np.abs(v @ v.T - np.eye(d)))))
    seconds = time.monotonic() - t0
    ok = worst < 1e-6 and seconds < 30.0
    check(1, "PCA bases orthonormal at d in {4, 8, 16, 48}", ok,
          f"max |V V^T - I| {worst:.3g} < 1e-6, {seconds:.1f}s < 30s")


def test_c02_eckart_young_and_linear_ae(patch_sample):
    t0 = time.monotonic()
    x = patch_sample.patches
    d = 16

    basis = fit_pca(patch_sample, d)
    recon = decode(basis, encode(basis, x))
    mse_pca = float(np.mean(np.sum((x - recon) ** 2, axis=1)))

    # independent oracle: dense eigensolve of the biased covariance
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    eigvals = np.linalg.eigvalsh(cov)  # ascending
    trailing = float(np.sum(eigvals[: x.shape[1] - d]))
    rel = abs(mse_pca - trailing) / trailing

    ae = fit_basis("linear_ae", patch_sample, d, GdConfig(steps=6000, lr=0.5, seed=0))
    recon_ae = decode(ae, encode(ae, x))
    mse_ae = float(np.mean(np.sum((x - recon_ae) ** 2, axis=1)))
    ratio = mse_ae / mse_pca
    seconds = time.monotonic() - t0

    ok = rel < 1e-6 and ratio < 1.05 and seconds < 120.0
    check(2, "PCA error matches trailing eigenvalues; linear AE within 5%", ok,
          f"oracle rel {rel:.3g} < 1e-6, AE/PCA {ratio:.4f} < 1.05, "
          f"{seconds:.1f}s < 120s")


def test_c03_schedule_identities():
    worst_vp = 0.0
    for kind in ("ddpm_linear_beta", "linear_gamma_sq"):
        sched = NoiseSchedule(kind=kind)
        t = np.arange(0, sched.steps + 1)
        gamma, sigma = gamma_sigma(sched, t)
        worst_vp = max(worst_vp, float(np.max(np.abs(gamma**2 + sigma**2 - 1.0))))

    single = NoiseSchedule(kind="single_level")
    _, s_single = gamma_sigma(single, np.arange(1, 1001))
    sigma_exact = bool(np.all(s_single == math.sqrt(1.0 / 3.0)))

    ddpm = NoiseSchedule(kind="ddpm_linear_beta")
    g_last, _ = gamma_sigma(ddpm, np.array([ddpm.steps]))
    prod = 1.0
    for k in range(ddpm.steps):
        beta = ddpm.beta_start + (ddpm.beta_end - ddpm.beta_start) * k / (ddpm.steps - 1)
        prod *= 1.0 - beta
    rel = abs(float(g_last[0]) ** 2 - prod) / prod

    ok = worst_vp < 1e-12 and sigma_exact and rel < 1e-12
    check(3, "variance preserved; single level exact; DDPM matches product", ok,
          f"max |gamma^2+sigma^2-1| {worst_vp:.3g} < 1e-12, "
          f"sigma = sqrt(1/3) exact: {sigma_exact}, product rel {rel:.3g} < 1e-12")


def _gradcheck_task(space: str, target: str, weight: str) -> float:
    """Worst relative gradient error through the full loss pipeline."""
    pats = child_rng(40, "pat", space, target).normal(size=(4096, 12))
    from ldae.patches import PatchSample

    basis = fit_pca(PatchSample(patches=pats, patch_size=2, source_images=1), 4)
    cor = CorruptionConfig(basis, NoiseSchedule(kind="fixed_gamma"), space)
    task = TrainTask(
        corruption=cor, loss=LossSpec(target, weight),
        basis_full=basis if target == "predict_original_image" else None,
    )
    config = dn.DenoiserConfig(
        token_dim_in=task.token_dim_in, token_dim_out=task.token_dim_out,
        tokens=16, width=16, depth=2, heads=4,
    )
    params = dn.init_params(config, child_rng(41, "init"))
    for i in range(config.depth):
        params[f"block{i}.cond2_w"] = 0.3 * child_rng(41, "c", i).normal(
            size=params[f"block{i}.cond2_w"].shape
        )
    images = child_rng(42, "imgs").uniform(-1, 1, size=(2, 8, 8, 3))
    t = np.array([100, 700])
    x_in, target_arr, lam = make_training_batch(task, images, t, child_rng(43, "d"))

    def loss_value() -> float:
        out, _ = dn.forward(params, config, x_in, t)
        return float(apply_loss(task, out, target_arr, lam)[0])

    out, cache = dn.forward(params, config, x_in, t, want_cache=True)
    loss, dpred = apply_loss(task, out, target_arr, lam)
    grads = dn.backward(params, config, cache, dpred)

    h = 1e-5
    picks = child_rng(44, "picks")
    worst = 0.0
    for name, g in grads.items():
        flat = params[name].reshape(-1)
        for j in picks.choice(flat.size, size=min(2, flat.size), replace=False):
            keep = flat[j]
            flat[j] = keep + h
            up = loss_value()
            flat[j] = keep - h
            down = loss_value()
            flat[j] = keep
            num = (up - down) / (2 * h)
            ana = g.reshape(-1)[j]
            worst = max(worst, abs(num - ana) / max(abs(num) + abs(ana), 1e-6))
    return worst


def test_c04_gradients_match_finite_differences():
    t0 = time.monotonic()
    worst = max(
        _gradcheck_task("latent_in_latent_out", "predict_noise", "unit"),
        _gradcheck_task("latent_in_latent_out", "predict_clean", "gamma_sq"),
        _gradcheck_task(
            "image_in_image_out", "predict_original_image", "inv_one_plus_sigma_sq"
        ),
    )
    seconds = time.monotonic() - t0
    ok = worst < 1e-4 and seconds < 60.0
    check(4, "analytic gradients match central differences, all loss targets",
          ok, f"max rel error {worst:.3g} < 1e-4, {seconds:.1f}s < 60s")


def test_c05_parseval_identity():
    rng = child_rng(50, "parseval")
    q, _ = np.linalg.qr(rng.normal(size=(12, 12)))
    pred = rng.normal(size=(4, 9, 12))
    x0 = rng.normal(size=(4, 9, 12))
    lam = rng.uniform(0.2, 1.0, size=4)
    full, _ = weighted_residual_loss(pred, x0, q, 5, lam, residual_weight=1.0)
    plain, _ = weighted_mse(pred, x0, lam)
    rel = abs(full - plain) / abs(plain)
    check(5, "residual loss with unit weights equals weighted MSE", rel < 1e-8,
          f"relative gap {rel:.3g} < 1e-8")


def test_c06_merged_t_equivalence(pretrained):
    r = pretrained
    x = child_rng(60, "x").normal(
        size=(3, r.config.tokens, r.config.token_dim_in)
    )
    merged = dn.merge_conditioning(r.params, r.config, 10)
    worst = 0.0
    for blocks in (1, r.config.depth // 2, r.config.depth):
        a = dn.encoder_features(r.params, r.config, x, 10, blocks)
        b = dn.merged_features(r.params, r.config, x, merged, blocks)
        worst = max(worst, float(np.max(np.abs(a - b))))
    check(6, "features at fixed t = 10 equal the merged-constant network",
          worst < 1e-6, f"max |diff| {worst:.3g} < 1e-6")


def test_c07_pretrained_probe_beats_floor(pretrained, dataset):
    _, synth_seconds = dataset
    r = pretrained
    margin_pts = 100.0 * r.margin
    seconds = r.seconds + synth_seconds
    ok = margin_pts >= 10.0 and seconds < 900.0
    check(7, "pretrained probe beats the random-init floor by >= 10 points",
          ok,
          f"top1 {r.top1:.4f}, floor {r.floor_top1:.4f}, "
          f"margin {margin_pts:.2f} pts >= 10, {seconds:.0f}s < 900s")


def test_c08_small_latent_beats_identity(tokenizer_sweep):
    rows = {(r[0], r[1]): r for r in tokenizer_sweep}
    assert all(r[5] == "ok" for r in tokenizer_sweep), tokenizer_sweep
    pca_best = max(rows[("pca", d)][3] for d in (4, 8, 16))
    identity = rows[("identity", 48)][3]
    ok = pca_best >= identity
    check(8, "best probe over d in {4, 8, 16} >= identity tokenizer at d = D",
          ok, f"pca best {pca_best:.4f} >= identity {identity:.4f}")


def test_c09_denoising_gain(pretrained):
    r = pretrained
    gain = r.psnr_gain
    check(9, "denoised PSNR beats noisy input by >= 3 dB at sigma = sqrt(1/3)",
          gain >= 3.0,
          f"model {r.psnr_model:.2f} dB vs noisy {r.psnr_noisy:.2f} dB, "
          f"gain {gain:.2f} dB >= 3")


def test_c10_persistence_round_trips(pretrained, dataset, workdir):
    bundle, _ = dataset
    r = pretrained

    basis_path = workdir / "basis.ldae"
    save_basis(str(basis_path), r.task.corruption.basis)
    basis2 = load_basis(str(basis_path))
    pats = extract_patches_batch(bundle.val_images[:4], basis2.patch_size)
    basis_ok = np.array_equal(
        encode(r.task.corruption.basis, pats), encode(basis2, pats)
    )

    model_path = workdir / "denoiser.ldae"
    dn.save_denoiser(str(model_path), r.config, r.params)
    config2, params2 = dn.load_denoiser(str(model_path))
    a, _ = dn.forward(r.params, r.config, pats, 10)
    b, _ = dn.forward(params2, config2, pats, 10)
    forward_ok = np.array_equal(a, b)

    raw = child_rng(100, "ppm").integers(0, 256, size=(17, 23, 3)).astype(np.uint8)
    ppm_path = workdir / "round.ppm"
    write_ppm(str(ppm_path), raw)
    ppm_ok = np.array_equal(read_ppm(str(ppm_path)), raw)

    micro_root = workdir / "micro"
    manifest = synth_dataset(str(micro_root / "ds"), n_classes=4, size=8,
                             per_class=8, seed=0, val_frac=0.25)
    micro = load_bundle(manifest)
    cfg = load_config()
    for dotted, v in {
        "tokenizer.patch_size": "2", "tokenizer.dim_latent": "4",
        "tokenizer.sample_patches": "512", "tokenizer.gd_steps": "200",
        "denoiser.width": "8", "denoiser.heads": "2",
        "train.batch_size": "16", "train.warmup_epochs": "0.5",
        "probe.epochs": "3", "trajectory.epochs": "1", "trajectory.depth": "1",
    }.items():
        section, key = dotted.split(".")
        cfg.set(section, key, v)
    run_trajectory(cfg, micro, str(micro_root / "a"))
    run_trajectory(cfg, micro, str(micro_root / "b"))
    csv_ok = (micro_root / "a" / "trajectory.csv").read_bytes() == (
        micro_root / "b" / "trajectory.csv"
    ).read_bytes()

    ok = basis_ok and forward_ok and ppm_ok and csv_ok
    check(10, "checkpoints, PPM, and trajectory CSVs reproduce exactly", ok,
          f"basis {basis_ok}, forward {forward_ok}, ppm {ppm_ok}, csv {csv_ok}")


def test_c11_trajectory_completeness(ladder):
    outcomes, out = ladder
    all_ok = len(outcomes) == 7 and all(o.ok for o in outcomes)
    above = [o.result.top1 >= o.result.floor_top1 for o in outcomes if o.ok]
    rows_above = len(above) == 7 and all(above)
    csv_text = (out / "trajectory.csv").read_text()
    annotated = all(o.spec.reference_top1 in csv_text for o in outcomes)
    worst = min(
        (o.result.top1 - o.result.floor_top1 for o in outcomes if o.ok),
        default=float("nan"),
    )
    ok = all_ok and rows_above and annotated
    detail = (
        f"7/7 rows ok: {all_ok}, every row >= floor: {rows_above} "
        f"(min margin {100 * worst:.2f} pts), references annotated: {annotated}"
    )
    if not all_ok:
        detail += "; errors: " + "; ".join(o.error for o in outcomes if not o.ok)
    check(11, "ladder emits all 7 rows, each above the random floor", ok, detail)
