"""Seed derivation: one master seed fans out into labelled, independent streams.

Every random draw in the simulator comes from a Generator produced here, keyed
by the master seed plus a label path such as ("client", 3, "batches").  The
derivation is a SHA-256 hash, so streams are stable across platforms and numpy
versions, and adding a new consumer never shifts an existing stream.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *labels: int | str) -> int:
    parts = [str(int(master))]
    for label in labels:
        if isinstance(label, bool) or not isinstance(label, (int, str)):
            raise TypeError(f"seed labels must be int or str, got {type(label).__name__}")
        parts.append(f"{type(label).__name__}:{label}")
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def make_rng(master: int, *labels: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *labels)))
