"""Synthetic dataset generation, ingestion, splits, and manifests.

Images are colored geometric shapes on textured gradient backgrounds;
the class is the shape type, while color, position, size, background,
and texture vary freely, so a probe has to read shape rather than raw
pixel statistics. Everything is derived from one seed: the same call
produces byte-identical files and the same checksum.

A dataset on disk is a directory of PPM (or PNG) files plus a labels CSV
and a JSON manifest holding the class-balanced train/val split.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import image as image_mod
from .rng import child_rng

SHAPES = ("disk", "square", "triangle", "ring", "plus", "diamond", "frame", "cross")

MANIFEST_NAME = "manifest.json"
LABELS_NAME = "labels.csv"


@dataclass
class DatasetManifest:
    root: str
    files: list[str]  # relative to root, parallel to labels
    labels: list[int]
    train_idx: list[int]
    val_idx: list[int]
    image_size: int
    n_classes: int
    checksum: str
    seed: int

    def __post_init__(self):
        if sorted(self.labels) and set(self.labels) != set(range(self.n_classes)):
            raise ValueError("labels must be dense integers from 0")
        overlap = set(self.train_idx) & set(self.val_idx)
        if overlap:
            raise ValueError(f"{len(overlap)} indices in both splits")


def _shape_sdf(kind: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    """Signed pixel distance to the shape boundary (positive inside)."""
    if kind == "disk":
        return r - np.sqrt(dx * dx + dy * dy)
    if kind == "square":
        return r - np.maximum(np.abs(dx), np.abs(dy))
    if kind == "diamond":
        return r - (np.abs(dx) + np.abs(dy)) / np.sqrt(2.0)
    if kind == "ring":
        dist = np.sqrt(dx * dx + dy * dy)
        return np.minimum(r - dist, dist - 0.55 * r)
    if kind == "frame":
        box = np.maximum(np.abs(dx), np.abs(dy))
        return np.minimum(r - box, box - 0.55 * r)
    if kind == "plus":
        arm = r / 3.0
        horiz = np.minimum(arm - np.abs(dy), r - np.abs(dx))
        vert = np.minimum(arm - np.abs(dx), r - np.abs(dy))
        return np.maximum(horiz, vert)
    if kind == "cross":
        u = (dx + dy) / np.sqrt(2.0)
        v = (dx - dy) / np.sqrt(2.0)
        return _shape_sdf("plus", u, v, r)
    if kind == "triangle":
        s1 = r - dy  # base
        s2 = (2.0 * dx + dy + r) / np.sqrt(5.0)  # left edge
        s3 = (-2.0 * dx + dy + r) / np.sqrt(5.0)  # right edge
        return np.minimum(np.minimum(s1, s2), s3)
    raise ValueError(f"unknown shape {kind!r}")


def render_shape_image(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (size, size, 3) float image: shape on a textured gradient."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    # background: linear color gradient in a random direction plus noise
    theta = rng.uniform(0.0, 2.0 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy) / size
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    c0 = rng.uniform(-0.8, 0.8, size=3)
    c1 = rng.uniform(-0.8, 0.8, size=3)
    img = c0 + (c1 - c0) * ramp[:, :, None]
    img += rng.normal(0.0, 0.05, size=img.shape)

    # foreground color kept away from the mean background color
    fg = rng.uniform(-1.0, 1.0, size=3)
    bg_mean = 0.5 * (c0 + c1)
    for _ in range(8):
        if np.linalg.norm(fg - bg_mean) >= 0.9:
            break
        fg = rng.uniform(-1.0, 1.0, size=3)

    cx = size / 2.0 + rng.uniform(-size / 16.0, size / 16.0)
    cy = size / 2.0 + rng.uniform(-size / 16.0, size / 16.0)
    r = rng.uniform(0.28, 0.36) * size
    sdf = _shape_sdf(kind, xx - cx, yy - cy, r)
    mask = np.clip(sdf + 0.5, 0.0, 1.0)[:, :, None]  # one-pixel soft edge
    img = img * (1.0 - mask) + fg * mask
    return np.clip(img, -1.0, 1.0)


def _balanced_val_counts(per_class: list[int], val_frac: float) -> list[int]:
    """Per-class validation counts: floors plus remainder to early classes."""
    total = sum(per_class)
    target = int(round(total * val_frac))
    counts = [int(np.floor(c * val_frac)) for c in per_class]
    extra = target - sum(counts)
    k = 0
    while extra > 0:
        if counts[k] < per_class[k]:
            counts[k] += 1
            extra -= 1
        k = (k + 1) % len(per_class)
    return counts


def _split_indices(
    labels: list[int], n_classes: int, val_frac: float, seed: int
) -> tuple[list[int], list[int]]:
    by_class = [[i for i, c in enumerate(labels) if c == k] for k in range(n_classes)]
    val_counts = _balanced_val_counts([len(g) for g in by_class], val_frac)
    train, val = [], []
    for k, group in enumerate(by_class):
        order = child_rng(seed, "split", k).permutation(len(group))
        shuffled = [group[j] for j in order]
        val.extend(shuffled[: val_counts[k]])
        train.extend(shuffled[val_counts[k] :])
    return sorted(train), sorted(val)


def _dataset_checksum(root: str, files: list[str]) -> str:
    outer = hashlib.sha256()
    for name in sorted(files):
        with open(os.path.join(root, name), "rb") as f:
            outer.update(hashlib.sha256(f.read()).digest())
    return outer.hexdigest()


def save_manifest(manifest: DatasetManifest) -> str:
    path = os.path.join(manifest.root, MANIFEST_NAME)
    with open(path, "w") as f:
        json.dump(asdict(manifest), f, indent=1)
    return path


def load_manifest(root: str) -> DatasetManifest:
    with open(os.path.join(root, MANIFEST_NAME)) as f:
        raw = json.load(f)
    raw["root"] = root  # directory may have moved since creation
    return DatasetManifest(**raw)


def synth_dataset(
    root: str, n_classes: int = 8, size: int = 32, per_class: int = 256,
    seed: int = 0, val_frac: float = 0.1,
) -> DatasetManifest:
    """Generate a balanced shape dataset on disk; deterministic per seed."""
    if not (1 <= n_classes <= len(SHAPES)):
        raise ValueError(f"n_classes must be in [1, {len(SHAPES)}]")
    if size < 8 or per_class < 1:
        raise ValueError("size must be >= 8 and per_class >= 1")
    if not (0.0 < val_frac < 1.0):
        raise ValueError("val_frac must be in (0, 1)")
    os.makedirs(root, exist_ok=True)

    files, labels = [], []
    k = 0
    for label in range(n_classes):
        for _ in range(per_class):
            img = render_shape_image(SHAPES[label], size, child_rng(seed, "image", k))
            name = f"{k:05d}_{SHAPES[label]}.ppm"
            image_mod.write_ppm(os.path.join(root, name), image_mod.to_uint8(img))
            files.append(name)
            labels.append(label)
            k += 1

    with open(os.path.join(root, LABELS_NAME), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["file", "label"])
        writer.writerows(zip(files, labels))

    train, val = _split_indices(labels, n_classes, val_frac, seed)
    manifest = DatasetManifest(
        root=root, files=files, labels=labels, train_idx=train, val_idx=val,
        image_size=size, n_classes=n_classes,
        checksum=_dataset_checksum(root, files), seed=seed,
    )
    save_manifest(manifest)
    return manifest


def _read_image_file(path: str) -> np.ndarray:
    if path.lower().endswith(".ppm"):
        return image_mod.read_ppm(path)
    if path.lower().endswith(".png"):
        try:
            from PIL import Image as PILImage
        except ImportError as e:
            raise ValueError(f"{path}: PNG support needs the Pillow extra") from e
        with PILImage.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    raise ValueError(f"{path}: unsupported format (PPM required, PNG optional)")


def ingest_dataset(
    root: str, labels_file: str | None = None, seed: int = 0, val_frac: float = 0.1,
) -> DatasetManifest:
    """Validate a directory of labeled images into a manifest.

    Every problem is collected and reported in one error: unreadable or
    malformed files, inconsistent dimensions, non-square or non-dense
    labels. Pixel values are normalized to [-1, 1] at load time.
    """
    labels_path = labels_file or os.path.join(root, LABELS_NAME)
    problems: list[str] = []
    files: list[str] = []
    labels: list[int] = []
    try:
        with open(labels_path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ["file", "label"]:
                problems.append(f"{labels_path}: expected header 'file,label'")
            for row in reader:
                if len(row) != 2:
                    problems.append(f"{labels_path}: bad row {row!r}")
                    continue
                files.append(row[0])
                try:
                    labels.append(int(row[1]))
                except ValueError:
                    problems.append(f"{labels_path}: non-integer label {row[1]!r}")
                    labels.append(-1)
    except OSError as e:
        raise ValueError(f"cannot read labels file: {e}") from e

    dims: dict[tuple[int, int], str] = {}
    for name in files:
        path = os.path.join(root, name)
        try:
            raw = _read_image_file(path)
        except (OSError, ValueError) as e:
            problems.append(str(e) if str(e).startswith(path) else f"{path}: {e}")
            continue
        if raw.shape[0] != raw.shape[1]:
            problems.append(f"{path}: non-square image {raw.shape[1]}x{raw.shape[0]}")
        dims.setdefault((raw.shape[0], raw.shape[1]), name)
    if len(dims) > 1:
        detail = ", ".join(f"{w}x{h} ({n})" for (h, w), n in sorted(dims.items()))
        problems.append(f"mixed image sizes: {detail}")

    valid = [c for c in labels if c >= 0]
    if valid:
        n_classes = max(valid) + 1
        if set(valid) != set(range(n_classes)):
            problems.append("labels are not dense integers from 0")
    else:
        n_classes = 0
        problems.append("no labeled images")

    if problems:
        raise ValueError("dataset rejected:\n  " + "\n  ".join(problems))

    train, val = _split_indices(labels, n_classes, val_frac, seed)
    size = next(iter(dims))[0]
    manifest = DatasetManifest(
        root=root, files=files, labels=labels, train_idx=train, val_idx=val,
        image_size=size, n_classes=n_classes,
        checksum=_dataset_checksum(root, files), seed=seed,
    )
    save_manifest(manifest)
    return manifest


def load_split(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Images (M, H, W, 3) in [-1, 1] and labels (M,) for 'train' or 'val'."""
    if split == "train":
        idx = manifest.train_idx
    elif split == "val":
        idx = manifest.val_idx
    elif split == "all":
        idx = list(range(len(manifest.files)))
    else:
        raise ValueError(f"unknown split {split!r}")
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    imgs = np.stack([
        image_mod.from_uint8(
            _read_image_file(os.path.join(manifest.root, manifest.files[i]))
        )
        for i in idx
    ])
    labels = np.array([manifest.labels[i] for i in idx], dtype=np.int64)
    return imgs, labels
