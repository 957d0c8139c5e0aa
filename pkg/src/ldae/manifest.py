"""Run manifests: the self-describing record every command writes.

A manifest is flat sectioned key=value text (same shape as the config
format) holding the resolved config, seed, code version, metrics,
timings, and artifact paths. Writes go through a temporary file and an
atomic rename, so an interrupted run never leaves a half-written
manifest behind.
"""

from __future__ import annotations

import os
import subprocess
import tempfile
from dataclasses import dataclass, field

from . import __version__

SCHEMA_VERSION = 1


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict[str, str] = field(default_factory=dict)  # flat section.key
    metrics: dict[str, str] = field(default_factory=dict)
    timings: dict[str, str] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    version: str = ""
    schema_version: int = SCHEMA_VERSION

    def set_metric(self, key: str, value) -> None:
        self.metrics[key] = repr(value) if isinstance(value, float) else str(value)

    def set_timing(self, key: str, seconds: float) -> None:
        self.timings[key] = f"{seconds:.3f}"


def code_version() -> str:
    """git describe when running from a checkout, package version otherwise."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"pkg-{__version__}"


def save_run_manifest(path: str, manifest: RunManifest) -> None:
    """Serialize atomically: write a sibling temp file, then rename."""
    lines = [
        "[run]",
        f"schema_version={manifest.schema_version}",
        f"command={manifest.command}",
        f"seed={manifest.seed}",
        f"version={manifest.version or code_version()}",
        "",
        "[config]",
    ]
    lines += [f"{k}={v}" for k, v in sorted(manifest.config.items())]
    lines += ["", "[metrics]"]
    lines += [f"{k}={v}" for k, v in sorted(manifest.metrics.items())]
    lines += ["", "[timings]"]
    lines += [f"{k}={v}" for k, v in sorted(manifest.timings.items())]
    lines += ["", "[artifacts]"]
    lines += [f"path{i}={p}" for i, p in enumerate(manifest.artifacts)]
    text = "\n".join(lines) + "\n"

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".manifest-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_run_manifest(path: str) -> RunManifest:
    sections: dict[str, dict[str, str]] = {}
    current: dict[str, str] | None = None
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = sections.setdefault(line[1:-1], {})
                continue
            if current is None or "=" not in line:
                raise ValueError(f"{path}: malformed manifest line {line!r}")
            key, _, value = line.partition("=")
            current[key] = value
    run = sections.get("run", {})
    if "schema_version" not in run:
        raise ValueError(f"{path}: missing schema_version")
    version = int(run["schema_version"])
    if version != SCHEMA_VERSION:
        raise ValueError(
            f"{path}: manifest schema {version}, this build reads {SCHEMA_VERSION}"
        )
    artifacts = [v for _, v in sorted(sections.get("artifacts", {}).items(),
                                      key=lambda kv: int(kv[0][4:]))]
    return RunManifest(
        command=run.get("command", ""),
        seed=int(run.get("seed", "0")),
        config=sections.get("config", {}),
        metrics=sections.get("metrics", {}),
        timings=sections.get("timings", {}),
        artifacts=artifacts,
        version=run.get("version", ""),
        schema_version=version,
    )
