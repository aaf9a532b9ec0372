"""Provenance for output directories: echoed config, hashes, verification."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

CONFIG_NAME = "config.json"
MANIFEST_NAME = "MANIFEST.json"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_config(out, config: dict) -> str:
    """Echo the run configuration into ``out`` and return its hash."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(json.dumps(config, indent=2, sort_keys=True, default=str) + "\n")
    return config_hash(config)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], chash: str | None = None) -> None:
    """CSV with an optional leading ``# config_hash=...`` comment line."""
    with open(path, "w", newline="") as fh:
        if chash:
            fh.write(f"# config_hash={chash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def write_manifest(out, chash: str, complete: bool = True) -> dict:
    """Record the sha256 of every file below ``out`` (except the manifest)."""
    out = Path(out)
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME:
            files[p.relative_to(out).as_posix()] = file_sha256(p)
    manifest = {"config_hash": chash, "complete": complete, "files": files}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def verify(out) -> list[str]:
    """Problems found in ``out``; an empty list means every hash checks."""
    out = Path(out)
    mpath = out / MANIFEST_NAME
    if not mpath.exists():
        return [f"{MANIFEST_NAME} missing"]
    manifest = json.loads(mpath.read_text())
    problems = []
    cfg = out / CONFIG_NAME
    if cfg.exists():
        if config_hash(json.loads(cfg.read_text())) != manifest.get("config_hash"):
            problems.append("config hash mismatch")
    else:
        problems.append(f"{CONFIG_NAME} missing")
    if not manifest.get("complete", False):
        problems.append("run marked incomplete")
    for name, digest in manifest.get("files", {}).items():
        p = out / name
        if not p.exists():
            problems.append(f"{name}: missing")
        elif file_sha256(p) != digest:
            problems.append(f"{name}: hash mismatch")
    for p in out.rglob("*.csv"):
        first = p.open().readline().strip()
        if first.startswith("# config_hash=") and first.split("=", 1)[1] != manifest.get("config_hash"):
            problems.append(f"{p.relative_to(out).as_posix()}: config hash differs")
    return problems
