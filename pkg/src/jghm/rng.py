"""Counter-based random streams keyed by (seed, purpose, indices).

Every stochastic routine in this package draws from a stream derived here.
A stream is identified by the master seed plus an arbitrary tuple of string
and integer key parts; the same key always yields the same stream, no matter
in which order streams are created or on which thread they are consumed.
"""

import hashlib

import numpy as np

__all__ = ["stream", "stream_key"]


def stream_key(seed: int, *parts) -> int:
    """Derive a 128-bit Philox key from a master seed and key parts.

    Parts may be ints (any size, including negatives) or strings. The
    encoding is length-prefixed so distinct part tuples never collide.
    """
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(16, "big", signed=True))
    for part in parts:
        if isinstance(part, str):
            data = part.encode("utf-8")
            h.update(b"s" + len(data).to_bytes(4, "big") + data)
        elif isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(16, "big", signed=True))
        else:
            raise TypeError(f"stream key parts must be str or int, got {type(part)!r}")
    return int.from_bytes(h.digest()[:16], "big")


def stream(seed: int, *parts) -> np.random.Generator:
    """Return an independent counter-based generator for (seed, *parts)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *parts)))
