"""Named random substreams derived from one global seed."""

import zlib

import numpy as np

STREAMS = ("init", "exploration", "replay", "oracle", "network", "eval")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; identical (seed, name, extra) give identical streams."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode()), *(int(e) for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
