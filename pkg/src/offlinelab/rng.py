"""Keyed random streams: each (master seed, experiment, trial) maps to its own generator.

Streams are derived, not drawn in sequence, so results do not depend on how
trials are scheduled across workers.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(experiment: str) -> int:
    return zlib.crc32(experiment.encode("utf-8"))


def stream(master_seed: int, experiment: str, trial: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(stream_key(experiment), int(trial)))
    return np.random.Generator(np.random.Philox(seq))
