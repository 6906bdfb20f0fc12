"""Reproducible parallel random numbers.

Every simulated path owns a private counter-based stream derived from
(master_seed, path_id) through SeedSequence spawn keys on top of Philox.
Streams are independent of worker count, batch layout, and draw order
across paths, so any parallel schedule reproduces the same numbers.
"""

from __future__ import annotations

import numpy as np

__all__ = ["path_generator", "path_normals"]


def path_generator(master_seed: int, path_id: int) -> np.random.Generator:
    """Independent generator for one path id."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(path_id),))
    return np.random.Generator(np.random.Philox(seq))


def path_normals(master_seed: int, path_id: int, shape) -> np.ndarray:
    """Standard normals from the path's stream, C-order step-major."""
    return path_generator(master_seed, path_id).standard_normal(shape)
