import hashlib
import struct

import numpy as np


def derive_seed(seed: int, *keys) -> int:
    """Deterministically mix ``keys`` into ``seed``; floats are hashed by their bit pattern."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<q", int(seed)))
    for k in keys:
        if isinstance(k, float):
            h.update(b"f" + struct.pack("<d", k))
        elif isinstance(k, (int, np.integer)):
            h.update(b"i" + struct.pack("<q", int(k)))
        else:
            h.update(b"s" + str(k).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based (Philox) generator, split by ``keys``."""
    if keys:
        seed = derive_seed(seed, *keys)
    return np.random.Generator(np.random.Philox(int(seed) % (1 << 63)))
