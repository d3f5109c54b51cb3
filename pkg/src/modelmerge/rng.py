"""Deterministic random streams for drop-style sparsification.

Masks must not depend on execution order, thread count, or platform, so
every tensor gets its own counter-based generator keyed by a seed that is
derived purely from stable identifiers (global seed, tensor name, model
index). Two runs of the same recipe therefore drop exactly the same
entries, no matter how the task graph was scheduled.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Collapse a sequence of ints and strings into a stable 64-bit seed.

    The encoding is injective: each part is tagged with its type and
    length, so ("ab", "c") and ("a", "bc") hash differently.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bool):
            raise TypeError("bool is not a valid seed part")
        if isinstance(part, int):
            h.update(b"i")
            h.update(part.to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            raw = part.encode("utf-8")
            h.update(b"s")
            h.update(len(raw).to_bytes(4, "little"))
            h.update(raw)
        else:
            raise TypeError(f"unsupported seed part type: {type(part).__name__}")
    return int.from_bytes(h.digest(), "little")


def uniform_stream(seed: int, n: int) -> np.ndarray:
    """Return ``n`` uniforms in [0, 1) from a Philox generator keyed by ``seed``.

    Philox is counter based: element ``i`` of the stream is a pure function
    of (seed, i), independent of how many values were drawn before it in
    other calls.
    """
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    return gen.random(n)
