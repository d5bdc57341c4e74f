"""Counter-based random streams.

Every random draw in the package comes from a stream addressed by
``(seed, purpose, step)``. The triple is hashed with BLAKE2b into a 128-bit
Philox key, so any stream can be regenerated independently of the others.
This is what makes resumed training and parallel evaluation reproducible.
"""
import hashlib

import numpy as np



def stream_key(seed, purpose, step=0):
    """Return the two 64-bit words keying the Philox generator."""
    payload = f"{int(seed)}\x1f{purpose}\x1f{int(step)}".encode()
    digest = hashlib.blake2b(payload, digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8").copy()


def stream(seed, purpose, step=0):
    """A fresh ``numpy.random.Generator`` for ``(seed, purpose, step)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, purpose, step)))


def derive_seed(seed, purpose, step=0):
    """Derive a child integer seed (63 bits) for nested components."""
    return int(stream_key(seed, purpose, step)[0] >> np.uint64(1))
