"""Flat sectioned key=value configuration.

Configs are INI-style text; every knob has a default below, files and
--override entries layer on top, and unknown section.key pairs are
rejected so typos fail loudly. The fully resolved config is echoed into
each run manifest, making every artifact self-describing.
"""

from __future__ import annotations

import configparser
import copy

import numpy as np

DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "root": "runs/dataset",
        "size": "32",
        "classes": "8",
        "per_class": "256",
        "val_frac": "0.1",
        "seed": "0",
    },
    "tokenizer": {
        "kind": "pca",
        "patch_size": "4",
        "dim_latent": "16",
        "sample_patches": "65536",
        "gd_steps": "6000",
        "gd_lr": "0.5",
        "kl_weight": "0.001",
    },
    "schedule": {
        "kind": "fixed_gamma",
        "steps": "1000",
        "beta_start": "0.0001",
        "beta_end": "0.02",
        "sigma_max": repr(float(np.sqrt(2.0))),
        "sigma_const": repr(float(np.sqrt(1.0 / 3.0))),
    },
    "loss": {
        "target": "predict_original_image",
        "weight": "inv_one_plus_sigma_sq",
        "residual_weight": "0.1",
    },
    "pipeline": {
        "space": "image_in_image_out",
        "drop_orthogonal_complement": "true",
    },
    "denoiser": {
        "width": "64",
        "depth": "8",
        "heads": "4",
    },
    "train": {
        "epochs": "20",
        "batch_size": "64",
        "base_lr": "0.004",
        "warmup_epochs": "2",
        "augment": "flip",
    },
    "probe": {
        "epochs": "30",
        "batch_size": "256",
        "lr": "0.1",
        "t_fixed": "10",
        "noisy_input": "false",
        "enc_blocks": "auto",  # auto = first half of the trained depth
        "flip_augment": "true",
    },
    "sweep": {
        "latent_dims": "4,8,16",
        "tokenizer_kinds": "pca,linear_ae,linear_vae,identity",
        "ts": "0,10,20,40,80",
    },
    "trajectory": {
        # reduced budget shared by the ladder and the tokenizer sweep
        "epochs": "12",
        "depth": "4",
    },
    "run": {
        "seed": "0",
        "out": "runs",
    },
}


class Config:
    """Resolved configuration: DEFAULTS + file + overrides."""

    def __init__(self, values: dict[str, dict[str, str]]):
        self._values = values

    def get(self, section: str, key: str) -> str:
        try:
            return self._values[section][key]
        except KeyError:
            raise KeyError(f"unknown config key {section}.{key}") from None

    def get_int(self, section: str, key: str) -> int:
        return int(self.get(section, key))

    def get_float(self, section: str, key: str) -> float:
        return float(self.get(section, key))

    def get_bool(self, section: str, key: str) -> bool:
        raw = self.get(section, key).lower()
        if raw in ("true", "1", "yes", "on"):
            return True
        if raw in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{section}.{key}: not a boolean: {raw!r}")

    def get_int_list(self, section: str, key: str) -> list[int]:
        raw = self.get(section, key).strip()
        return [int(tok) for tok in raw.split(",") if tok.strip()] if raw else []

    def get_str_list(self, section: str, key: str) -> list[str]:
        raw = self.get(section, key).strip()
        return [tok.strip() for tok in raw.split(",") if tok.strip()] if raw else []

    def set(self, section: str, key: str, value: str) -> None:
        if section not in self._values or key not in self._values[section]:
            raise KeyError(f"unknown config key {section}.{key}")
        self._values[section][key] = value

    def flat(self) -> dict[str, str]:
        """Sorted 'section.key' -> value view for manifests and reports."""
        return {
            f"{s}.{k}": v
            for s in sorted(self._values)
            for k, v in sorted(self._values[s].items())
        }


def load_config(path: str | None = None) -> Config:
    """Defaults, optionally overlaid with an INI-style file."""
    values = copy.deepcopy(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case
        with open(path) as f:
            parser.read_file(f)
        for section in parser.sections():
            if section not in values:
                raise KeyError(f"unknown config section [{section}] in {path}")
            for key, value in parser.items(section):
                if key not in values[section]:
                    raise KeyError(f"unknown config key {section}.{key} in {path}")
                values[section][key] = value
    return Config(values)


def apply_overrides(cfg: Config, overrides: list[str]) -> None:
    """Apply repeatable --override section.key=value entries in order."""
    for entry in overrides:
        head, sep, value = entry.partition("=")
        if not sep or "." not in head:
            raise ValueError(f"override must look like section.key=value: {entry!r}")
        section, _, key = head.partition(".")
        cfg.set(section.strip(), key.strip(), value.strip())
