"""Deterministic noise substreams.

Every random draw in the library comes from a substream addressed by
``(root seed, purpose, indices...)``.  Substreams are derived through
``numpy.random.SeedSequence`` spawn keys, so they are independent of the
order in which they are created and of how work is sharded across
workers.  Ensembles are split into fixed-size blocks, each block owning
its own substream: growing an ensemble or redistributing blocks across
processes never changes the numbers a given block produces.
"""

import zlib

import numpy as np

#: Paths per ensemble block.  Fixed so that block substreams (and hence all
#: ensemble statistics) do not depend on the total ensemble size.
BLOCK_SIZE = 8192


def _key_part(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("substream indices must be nonnegative")
        return int(part)
    raise TypeError(f"substream path parts must be str or int, got {part!r}")


def stream_key(*path):
    """Normalize a substream path to a tuple of nonnegative ints."""
    return tuple(_key_part(p) for p in path)


def substream(root, *path):
    """Return a ``numpy.random.Generator`` for substream ``path`` under
    ``root``.  Identical arguments always yield an identical stream."""
    seq = np.random.SeedSequence(int(root), spawn_key=stream_key(*path))
    return np.random.Generator(np.random.PCG64(seq))


def ensemble_blocks(n, block_size=BLOCK_SIZE):
    """Partition ``n`` trajectories into substream blocks.

    Yields ``(start, size, block_index)``.  Block boundaries depend only on
    ``block_size``, never on ``n``, so the first blocks of a larger
    ensemble reproduce a smaller one exactly.
    """
    if n <= 0:
        raise ValueError("ensemble size must be positive")
    start = 0
    block = 0
    while start < n:
        size = min(block_size, n - start)
        yield start, size, block
        start += size
        block += 1
