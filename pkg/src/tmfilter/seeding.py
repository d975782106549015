"""Deterministic random-stream derivation.

All stochastic code derives independent generators from one experiment seed
through spawn keys, so results do not depend on the order in which streams
are consumed.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream", "substream_seq"]

# Spawn-key domains. Keeping them distinct guarantees stream independence
# between truth simulation, ensemble initialization, and assimilation steps.
DOMAIN_TRUTH = 0
DOMAIN_INITIAL_ENSEMBLE = 1
DOMAIN_ASSIMILATION = 2


def substream_seq(seed, *key) -> np.random.SeedSequence:
    """Child seed sequence for a (seed, key...) address."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(
            entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(int(k) for k in key)
        )
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))


def substream(seed, *key) -> np.random.Generator:
    """Generator for a (seed, key...) address."""
    return np.random.default_rng(substream_seq(seed, *key))
