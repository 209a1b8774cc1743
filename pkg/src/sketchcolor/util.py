"""Small shared helpers: digests, seed derivation, atomic writes."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Iterable

import torch
from torch import nn


def module_digest(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in state-dict key order.

    Bit-exact: any change to weights (including dtype) changes the digest.
    """
    h = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        h.update(key.encode())
        h.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(paths: Iterable[Path]) -> str:
    """Digest of a set of files, independent of enumeration order."""
    h = hashlib.sha256()
    for path in sorted(paths):
        h.update(str(path.name).encode())
        h.update(bytes.fromhex(file_digest(path)))
    return h.hexdigest()


def derive_seed(master: int, stream: str) -> int:
    """Fan one master seed out into named, decorrelated streams."""
    digest = hashlib.sha256(f"{master}:{stream}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file + rename so readers never see partial content."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def atomic_write_json(path: str | Path, obj: object) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def set_requires_grad(modules: nn.Module | Iterable[nn.Module], flag: bool) -> None:
    if isinstance(modules, nn.Module):
        modules = [modules]
    for module in modules:
        for p in module.parameters():
            p.requires_grad_(flag)


def grad_norm(module: nn.Module) -> float:
    """L2 norm over all parameter gradients; 0.0 when no grads exist."""
    total = 0.0
    for p in module.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return total ** 0.5
