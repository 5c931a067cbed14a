"""Seedable, splittable randomness built on the Philox counter-based generator.

Every source of randomness in this package flows through :func:`make_rng`.
A stream is identified by a root seed plus a tuple of non-negative integers
(the "stream key"); the same (seed, key) always yields the same sequence,
and distinct keys yield statistically independent streams. Splitting a
stream means extending its key, which maps onto numpy's
``SeedSequence(entropy=seed, spawn_key=key)`` mechanism feeding a
``Philox`` bit generator.
"""

from __future__ import annotations

import numpy as np

# Reserved top-level stream ids. Extend the tuple after the id to split further.
STREAM_PARAM_INIT = 0  # model parameter initialisation, per-parameter ordinal
STREAM_SHUFFLE = 1  # per-epoch batch shuffling
STREAM_SPLIT = 2  # held-out context selection, per class
STREAM_DATAGEN = 3  # synthetic image generation, per (class, context, index)
STREAM_FILL = 4  # ad-hoc tensor fills (uniform/kaiming called with a bare seed)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return the deterministic generator for (seed, stream key)."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    if any(s < 0 for s in stream):
        raise ValueError(f"stream key entries must be non-negative, got {stream}")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(stream))
    return np.random.Generator(np.random.Philox(seq))
