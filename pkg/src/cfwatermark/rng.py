"""Named, splittable random streams.

Every random draw in the package comes from ``stream(seed, *purpose)``. The
purpose parts are joined with ``"/"`` and hashed together with the 64-bit
master seed (BLAKE2b, 16-byte digest) into the 128-bit key of a Philox
counter-based generator. The convention for purpose strings is
``stage[/index...]``: for example ``stream(seed, "subset", 3, "embed")`` or
``stream(seed, "cf", "row", 17)``. Streams with different purposes are
statistically independent, and a stream depends only on its (seed, purpose)
pair, not on how many other streams were drawn before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def _key(seed: int, purpose: tuple) -> int:
    text = f"{int(seed) & MASK64}:" + "/".join(str(p) for p in purpose)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *purpose) -> np.random.Generator:
    """Return the generator for ``purpose`` under master ``seed``."""
    return np.random.Generator(np.random.Philox(key=_key(seed, purpose)))


def derive_seed(seed: int, *purpose) -> int:
    """A 64-bit child seed, for APIs that take an integer seed."""
    return _key(seed, purpose) & MASK64
