"""Named random substreams.

A stream is a Philox-4x64 counter-based generator whose 128-bit key is the
first 16 bytes of SHA-256 over the little-endian u64 seed followed by the
labels, each rendered as UTF-8 and terminated by a NUL byte.  Distinct label
paths give statistically independent streams, so skipping one stage never
shifts the numbers another stage draws.
"""

import hashlib
import struct

import numpy as np

MASK64 = (1 << 64) - 1


def stream_key(seed, *labels):
    h = hashlib.sha256(struct.pack("<Q", int(seed) & MASK64))
    for label in labels:
        h.update(str(label).encode("utf-8") + b"\0")
    return int.from_bytes(h.digest()[:16], "little")


def substream(seed, *labels):
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))


def derive_seed(seed, *labels):
    """A 64-bit child seed for the given label path."""
    return stream_key(seed, *labels) & MASK64
