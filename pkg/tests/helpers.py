"""Shared test data builders."""

import numpy as np

from aggtopk.model import Dataset


def make_d0() -> Dataset:
    return Dataset.from_vertices([[(0, 2), (10, 2)], [(0, 0), (10, 10)], [(0, 6), (5, 0), (10, 6)]])

def random_dataset(rng: np.random.Generator, m: int, n_avg: float, T: float = 1000.0, mixed: bool = False) -> Dataset:
    """Random walks with partial extents; ``mixed`` allows negative values."""
    verts = []
    for _ in range(m):
        n = int(rng.geometric(1.0 / n_avg))
        a, b = np.sort(rng.uniform(0, T, 2)) if rng.random() < 0.5 else (0.0, T)
        if b - a < 1e-6:
            a, b = 0.0, T
        t = np.unique(np.concatenate([[a, b], rng.uniform(a, b, n - 1)]))
        v = np.cumsum(rng.normal(0, 3, len(t)))
        v = v - 2.0 if mixed else np.abs(v + 50)
        verts.append(list(zip(t, v)))
    return Dataset.from_vertices(verts, T)
