"""Deterministic RNG substreams derived from one top-level seed.

Every randomized feature (init, folds, batch order, mixup, dropout, synthetic
data) pulls from its own named stream so that toggling one feature never
shifts another's draws.
"""

import zlib

import numpy as np


def _tag_ints(tags):
    out = []
    for t in tags:
        if isinstance(t, str):
            out.append(zlib.crc32(t.encode("utf-8")))
        else:
            out.append(int(t) & 0xFFFFFFFF)
    return out


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Independent generator for the sub-stream named by `tags`."""
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_tag_ints(tags)])
    return np.random.default_rng(seq)


def derive_seed(seed: int, *tags) -> int:
    """Integer seed for the sub-stream named by `tags` (for APIs taking ints)."""
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_tag_ints(tags)])
    return int(seq.generate_state(1)[0])
