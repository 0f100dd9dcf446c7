"""Config file loading (TOML or JSON), canonical hashing, run manifests."""

from __future__ import annotations

import hashlib
import json
import subprocess
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


def load_config(path: str | Path) -> dict:
    """Parse a TOML or JSON config file (TOML tried first for unknown
    extensions)."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(data.decode("utf-8"))
    try:
        return tomllib.loads(data.decode("utf-8"))
    except tomllib.TOMLDecodeError:
        return json.loads(data.decode("utf-8"))


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_revision() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5, check=False
        )
    except OSError:
        return None
    rev = out.stdout.strip()
    return rev if out.returncode == 0 and rev else None


def write_run_manifest(
    path: str | Path,
    command: str,
    config: dict,
    dataset_paths: dict[str, str | Path] | None = None,
) -> Path:
    """Record what produced an output directory: config hash, git revision,
    and dataset digests."""
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "git_revision": git_revision(),
        "datasets": {
            name: {"path": str(p), "sha256": file_sha256(p)}
            for name, p in (dataset_paths or {}).items()
            if Path(p).exists()
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path
