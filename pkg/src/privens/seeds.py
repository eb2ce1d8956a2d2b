"""Deterministic seed derivation for pipeline stages.

Stage seeds are a keyed hash of (master seed, stage name, fold), so any
stage can be re-run in isolation and still see the same random stream.
"""

import hashlib


def derive_seed(master_seed: int, stage: str, fold: int | None = None) -> int:
    """Return a 64-bit seed determined by (master_seed, stage, fold)."""
    key = f"{master_seed}:{stage}:{'-' if fold is None else fold}"
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")
