"""Versioned ``.npz`` container shared by the VE and denoiser checkpoints."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "igdslab-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    header = json.dumps({"format": FORMAT, "version": VERSION, "kind": kind, "meta": meta}, sort_keys=True)
    payload = {f"a/{k}": np.ascontiguousarray(v) for k, v in arrays.items()}
    with open(Path(path), "wb") as fh:
        np.savez(fh, __header__=np.array(header), **payload)


def load(path, kind: str) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__header__" not in z:
            raise CheckpointError(f"{path}: not a checkpoint")
        header = json.loads(str(z["__header__"]))
        arrays = {k[2:]: z[k].copy() for k in z.files if k.startswith("a/")}
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    if header.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r}, expected {kind!r}")
    return arrays, header["meta"]
