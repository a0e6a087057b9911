"""Named, reproducible random streams.

Every consumer of randomness asks for a stream by purpose name ("truth",
"noise", "background", "bound", ...). Streams derive from one top-level seed
through ``numpy.random.SeedSequence`` with a spawn key computed from the name,
so adding a new consumer never shifts the numbers another consumer sees.
Bit generator is Philox (counter based, 64-bit keyed).
"""
import zlib

import numpy as np


def _name_key(name):
    return zlib.crc32(name.encode("utf-8"))


def stream(seed, *names):
    """Return a Generator for ``seed`` specialised by the given name path.

    Names may be strings or non-negative ints (e.g. a cycle or trajectory id).
    """
    key = tuple(_name_key(n) if isinstance(n, str) else int(n) for n in names)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def as_generator(seed_or_rng, *names):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return stream(0 if seed_or_rng is None else seed_or_rng, *names)
