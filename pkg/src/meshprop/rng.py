"""Deterministic random-stream derivation.

Every random draw in a run comes from a stream keyed by
``(master_seed, device, round, purpose)``. Keys are hashed with SHA-256 and
used as the 128-bit key of a Philox counter-based generator, so streams do not
depend on the order in which they are requested or on the worker that
requests them.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(master_seed: int, device: int, round_: int, purpose: str) -> int:
    msg = f"{int(master_seed)}|{int(device)}|{int(round_)}|{purpose}".encode()
    return int.from_bytes(hashlib.sha256(msg).digest()[:16], "little")


def derive_rng(master_seed: int, device: int, round_: int, purpose: str) -> np.random.Generator:
    """Fresh generator for one (seed, device, round, purpose) tuple.

    Use ``device=-1`` / ``round_=-1`` for draws that are not tied to a device
    or round (topology generation, partitioning, initialization).
    """
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, device, round_, purpose)))
