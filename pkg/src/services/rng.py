"""Seed derivation: one master seed fans out into independent named streams."""

import zlib

import numpy as np
import torch


def _key_to_int(key: int | str) -> int:
    if isinstance(key, int):
        return key
    return zlib.crc32(key.encode("utf-8"))


def derive_seed(master: int, *keys: int | str) -> int:
    """Derive a 63-bit seed from a master seed and a path of keys.

    Args:
        master: Experiment-level seed
        *keys: Stream path, e.g. ("case", 3) or ("patch", 17)

    Returns:
        Non-negative integer usable by both numpy and torch
    """
    seq = np.random.SeedSequence(entropy=master, spawn_key=tuple(_key_to_int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def numpy_rng(master: int, *keys: int | str) -> np.random.Generator:
    """Numpy generator on a derived stream."""
    return np.random.default_rng(derive_seed(master, *keys))


def torch_generator(master: int, *keys: int | str) -> torch.Generator:
    """CPU torch generator on a derived stream."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(master, *keys))
    return gen
