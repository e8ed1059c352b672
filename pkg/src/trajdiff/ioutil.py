"""Manifest and hashing helpers shared by dataset, checkpoint, and sample files.

Every persisted artifact is a directory holding a ``manifest.json`` plus one
or more binary blobs.  Manifests carry a ``content_hash`` computed over the
canonical JSON of their deterministic fields and the raw blob bytes, so
identical configs and seeds reproduce bit-identical hashes.  Timing fields
live outside the hashed subset.
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"


def canonical_json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True, allow_nan=False).encode()


def content_hash(hashed_fields: dict, *blobs: bytes) -> str:
    h = hashlib.sha256()
    h.update(canonical_json_bytes(hashed_fields))
    for blob in blobs:
        h.update(blob)
    return h.hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, manifest: dict):
    path = Path(directory) / MANIFEST_NAME
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_manifest(directory) -> dict:
    with open(Path(directory) / MANIFEST_NAME) as fh:
        return json.load(fh)


def float_list(arr) -> list:
    """JSON-safe list of Python floats (shortest round-trip reprs)."""
    return [float(x) for x in np.asarray(arr).ravel()]


def int_list(arr) -> list:
    return [int(x) for x in np.asarray(arr).ravel()]


class WorkdirLock:
    """One-command-at-a-time lock on an artifact directory."""

    def __init__(self, directory):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"{self.path} exists; another command is running in this "
                "directory (remove the file if it is stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False
