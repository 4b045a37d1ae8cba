"""Named deterministic RNG streams.

Every source of randomness in a run (init, shuffling, reservoir draws,
codebook training, ...) pulls from its own stream derived from the master
seed by a labeled hash. Adding or removing a consumer of one stream never
perturbs the others, so e.g. data order is identical across strategies.
"""

import hashlib

import numpy as np


def stream_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream_rng(master: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(master, label)))


class SeedStreams:
    """Stream factory for one run. `rng` returns a fresh generator for the
    label (same label -> same sequence); `persistent` returns a generator
    cached for the lifetime of the run, for streams consumed incrementally
    across steps (reservoir, replay sampling, rewiring)."""

    def __init__(self, master: int):
        self.master = int(master)
        self._persistent: dict[str, np.random.Generator] = {}

    def rng(self, label: str) -> np.random.Generator:
        return stream_rng(self.master, label)

    def persistent(self, label: str) -> np.random.Generator:
        if label not in self._persistent:
            self._persistent[label] = stream_rng(self.master, label)
        return self._persistent[label]
