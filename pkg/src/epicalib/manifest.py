"""Run manifests: traceability records written next to every pipeline artifact.

A manifest pins the stage name, a hash of the configuration that produced the
artifact, hashes of all declared input artifacts, and the RNG seeds used.
Manifests contain only deterministic content so a rerun from identical inputs
reproduces identical bytes; wall-clock timings go to a separate ``timing.json``
that is excluded from reproducibility comparisons.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"
TIMING_NAME = "timing.json"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(config: dict) -> str:
    return sha256_text(canonical_json(config))


def write_manifest(directory: str | Path, stage: str, config: dict,
                   inputs: dict[str, str | Path] | None = None,
                   seeds: dict | None = None, extra: dict | None = None) -> dict:
    """Write ``manifest.json`` into `directory` and return its contents.

    `inputs` maps logical names to artifact paths; their content hashes are
    recorded so downstream stages can verify them.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": stage,
        "tool_version": __version__,
        "config": config,
        "config_hash": config_hash(config),
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)}
                   for name, p in (inputs or {}).items()},
        "seeds": seeds or {},
    }
    if extra:
        manifest["extra"] = extra
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return json.loads(path.read_text())


def write_timing(directory: str | Path, seconds: float) -> None:
    (Path(directory) / TIMING_NAME).write_text(
        json.dumps({"wall_clock_seconds": seconds}) + "\n")


def verify_input(path: str | Path, expected_sha256: str) -> None:
    actual = sha256_file(path)
    if actual != expected_sha256:
        raise ValueError(f"input hash mismatch for {path}: expected {expected_sha256}, got {actual}")


def tree_digest(root: str | Path) -> dict[str, str]:
    """Relative path -> sha256 for every artifact under `root`.

    ``timing.json`` files are excluded: they are diagnostics, not artifacts,
    and are the only files allowed to differ between identical reruns.
    """
    root = Path(root)
    digest = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != TIMING_NAME:
            digest[str(path.relative_to(root))] = sha256_file(path)
    return digest
