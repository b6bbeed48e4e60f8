"""Named, counter-based random streams.

Every draw in the package is addressed by ``(seed, stream name, block)``.
Particles are grouped in fixed blocks of :data:`BLOCK` so that the noise a
particle sees depends only on the seed, the stream name and its own index,
never on the ensemble size or on how many worker threads produced it.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 1024


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def generator(seed: int, name: str, block: int = 0) -> np.random.Generator:
    """Return the Philox generator for one block of one named stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_stream_key(name), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def normal_block(seed: int, name: str, block: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normals of shape ``(BLOCK, *shape)`` for one particle block."""
    return generator(seed, name, block).standard_normal((BLOCK, *shape))


def particle_normals(
    seed: int,
    name: str,
    n_particles: int,
    shape: tuple[int, ...],
    start: int = 0,
    threads: int = 1,
) -> np.ndarray:
    """Normals for particles ``start .. start + n_particles - 1``.

    Blocks may be generated concurrently; the result does not depend on
    ``threads``.
    """
    if n_particles <= 0:
        return np.empty((0, *shape))
    first = start // BLOCK
    last = (start + n_particles - 1) // BLOCK
    blocks = list(range(first, last + 1))
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda b: normal_block(seed, name, b, shape), blocks))
    else:
        parts = [normal_block(seed, name, b, shape) for b in blocks]
    out = np.concatenate(parts, axis=0)
    off = start - first * BLOCK
    return out[off : off + n_particles]
