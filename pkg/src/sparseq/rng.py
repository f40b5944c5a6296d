"""Reproducible random streams.

Every stream is a Philox-4x64 counter-based generator keyed through
``numpy.random.SeedSequence(seed, spawn_key=keys)``. Both algorithms are
fully specified, so a stream depends only on ``(seed, keys)``; distinct key
tuples give independent streams regardless of the order they are created in.

Key layout used across the package (first key component):

====  =========================================
   1  terrain field of a scene
   2  forest field of a scene
   3  distractor feature channels
   4  per-track geolocation offsets
   5  per-track label noise, second key = track index
   6  scene seeds of an experiment, second key = split, third = index
  10  model initialisation, second key = layer index
  11  training data order, second key = epoch
====  =========================================
"""

from __future__ import annotations

import numpy as np

TERRAIN = 1
FOREST = 2
DISTRACTORS = 3
OFFSETS = 4
TRACK_NOISE = 5
SCENES = 6
INIT = 10
SHUFFLE = 11


def stream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derived_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed drawn from its own stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1
