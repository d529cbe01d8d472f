"""Named random substreams derived from a single experiment seed."""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name`` under ``seed``.

    The same (seed, name) pair always yields the same stream, and streams for
    different names do not overlap.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
