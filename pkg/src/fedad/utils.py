"""Small shared helpers: hashing, atomic file writes, deterministic seeding."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch


def array_checksum(*arrays: np.ndarray) -> str:
    """Content hash of one or more arrays (dtype, shape and raw bytes)."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def config_hash(obj) -> str:
    """Stable short hash of any JSON-serializable object."""
    payload = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def write_bytes_atomic(path, data: bytes) -> None:
    """Write-temp-then-rename so readers never observe partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_atomic(path, obj) -> None:
    write_bytes_atomic(path, json.dumps(obj, indent=2, sort_keys=True).encode())


def read_json(path):
    with open(path) as f:
        return json.load(f)


def seed_everything(seed: int, single_thread: bool = True) -> np.random.Generator:
    """Seed torch, force single-threaded math for bitwise reproducibility,
    and return a numpy generator for batch shuffling."""
    torch.manual_seed(seed)
    if single_thread:
        torch.set_num_threads(1)
    return np.random.default_rng(seed)
