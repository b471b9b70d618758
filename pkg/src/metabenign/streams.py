"""Splittable, counter-based random streams.

Every draw in the package is keyed by ``(master_seed, *path)`` so that results
do not depend on the order in which tasks, cells or seeds are evaluated.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


def _tag_to_int(tag: int | str) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    if tag < 0:
        raise ValueError(f"stream tags must be non-negative, got {tag}")
    return int(tag)


@dataclass(frozen=True)
class RandomStream:
    """A position in the key tree; ``generator()`` yields a fresh Philox generator."""

    seed: int
    path: tuple[int, ...] = ()

    def child(self, *tags: int | str) -> RandomStream:
        return RandomStream(self.seed, self.path + tuple(_tag_to_int(t) for t in tags))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))
