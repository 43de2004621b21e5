"""Deterministic random-stream derivation.

All randomness in the package flows from a single user-supplied integer seed.
Independent stages (data synthesis, training, bootstrap replicates, simulation
iterations) get their own child streams derived from that root through
``numpy.random.SeedSequence`` spawn keys, so adding or reordering one stage
never perturbs the draws of another.

String labels are folded into the spawn key via CRC-32 of their UTF-8 bytes.
CRC-32 is stable across platforms and Python versions, unlike ``hash()``.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ValidationError


def _key_part(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValidationError(f"seed key parts must be non-negative, got {part}")
        return int(part)
    raise TypeError(f"seed key part must be str or int, got {type(part).__name__}")


def derive(root_seed: int, *parts) -> np.random.SeedSequence:
    """Derive a child SeedSequence from a root seed and a key path.

    ``parts`` may mix strings (stage names) and non-negative integers (fold
    ids, replicate ids). The same (root_seed, parts) always yields the same
    stream; any difference in the path yields an independent one.
    """
    if root_seed < 0:
        raise ValidationError(f"root seed must be non-negative, got {root_seed}")
    spawn_key = tuple(_key_part(p) for p in parts)
    return np.random.SeedSequence(int(root_seed), spawn_key=spawn_key)


def generator(root_seed: int, *parts) -> np.random.Generator:
    """Convenience wrapper: a fresh PCG64 Generator for the derived stream."""
    return np.random.Generator(np.random.PCG64(derive(root_seed, *parts)))
