"""Seed splitting: one master seed fans out into named, per-index streams.

Stream ids are derived by hashing, so adding workers or changing chunk sizes
never shifts another stream's values.
"""
import hashlib

import torch

_SEED_MASK = (1 << 63) - 1


def derive_seed(master_seed: int, stream: str, index: int = 0) -> int:
    digest = hashlib.sha256(f"{master_seed}:{stream}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & _SEED_MASK


def make_generator(master_seed: int, stream: str, index: int = 0) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(master_seed, stream, index))
    return gen
