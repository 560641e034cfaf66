"""Named random streams derived from one integer seed. No module touches global RNG state."""
import zlib

import numpy as np


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    key = [int(seed), zlib.crc32(name.encode())] + [int(i) for i in index]
    return np.random.default_rng(np.random.SeedSequence(key))


def torch_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(0, 2**62))
