"""Labelled random substreams.

Every stochastic component draws from ``substream(seed, label, index)`` so that
adding a new consumer never shifts the draws seen by existing ones.
"""
import zlib

import numpy as np


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def substream(seed: int, label: str, *index: int) -> np.random.Generator:
    entropy = [int(seed), label_key(label), *(int(i) for i in index)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, label: str, *index: int) -> int:
    """Integer seed for a labelled child component (e.g. one experiment cell)."""
    entropy = [int(seed), label_key(label), *(int(i) for i in index)]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0] >> 1)
