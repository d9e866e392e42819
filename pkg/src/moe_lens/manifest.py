"""Run manifests: every CLI output gets a sidecar JSON recording the command
line, config hash, input/output digests, tool version, and the seeds in
play. Replaying a manifest on identical inputs must reproduce identical
output digests."""

from __future__ import annotations

import hashlib
import json
import os

from . import __version__


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(args: dict) -> str:
    blob = json.dumps(args, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def build_manifest(command: list[str], args: dict, inputs: list[str],
                   outputs: list[str], seeds: dict) -> dict:
    return {
        "tool_version": __version__,
        "command": list(command),
        "config_hash": config_hash(args),
        "inputs": {os.path.basename(p): sha256_file(p) for p in sorted(inputs)},
        "seeds": seeds,
        "outputs": {os.path.basename(p): sha256_file(p) for p in sorted(outputs)},
    }


def manifest_path(output_path) -> str:
    return str(output_path) + ".manifest.json"


def write_manifests(command: list[str], args: dict, inputs: list[str],
                    outputs: list[str], seeds: dict) -> None:
    """One sidecar manifest beside every output file."""
    doc = build_manifest(command, args, inputs, outputs, seeds)
    for out in outputs:
        with open(manifest_path(out), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
