"""Deterministic random-stream derivation for reproducible parallel Monte Carlo.

Every stochastic component draws from a Philox (counter-based) generator whose
key is derived from ``(master_seed, purpose, *indices)``.  Streams are therefore
independent of execution order and of the number of workers: replicate r always
sees the same numbers whether it runs first, last, or on another process.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "substream_seed"]


def _purpose_code(purpose: str) -> int:
    # stable across processes and platforms (unlike hash())
    return zlib.crc32(purpose.encode("utf-8"))


def stream(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Return the generator for one (purpose, index...) slot under a master seed.

    Args:
        master_seed: The run-level seed from the config/manifest.
        purpose: Component label, e.g. "surface", "survey", "latent-chain".
        indices: Integers identifying the slot (replicate number, EU index, ...).

    Returns:
        An independent ``np.random.Generator`` backed by counter-based Philox.
    """
    seq = np.random.SeedSequence(
        entropy=int(master_seed),
        spawn_key=(_purpose_code(purpose), *[int(i) for i in indices]),
    )
    return np.random.Generator(np.random.Philox(seq))


def substream_seed(master_seed: int, purpose: str, *indices: int) -> int:
    """Derive a plain integer seed for APIs that take seeds rather than generators."""
    seq = np.random.SeedSequence(
        entropy=int(master_seed),
        spawn_key=(_purpose_code(purpose), *[int(i) for i in indices]),
    )
    return int(seq.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFF)
