"""Adjacency and pairwise-distance matrices."""
from __future__ import annotations

from collections import deque

import numpy as np

from .smiles import Molecule

UNREACHABLE = 1e3


def adjacency(m: Molecule) -> np.ndarray:
    a = np.zeros((m.n_atoms, m.n_atoms), dtype=np.float64)
    for i, j, order in m.bonds:
        a[i, j] = a[j, i] = order
    return a


def hop_distances(m: Molecule) -> np.ndarray:
    """All-pairs shortest-path hop counts; unreachable pairs get ``UNREACHABLE``."""
    n = m.n_atoms
    adj = m.neighbors()
    d = np.full((n, n), UNREACHABLE, dtype=np.float64)
    for s in range(n):
        d[s, s] = 0.0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if d[s, w] == UNREACHABLE:
                    d[s, w] = d[s, u] + 1
                    queue.append(w)
    return d


def euclidean_distances(coords: np.ndarray) -> np.ndarray:
    p = np.asarray(coords, dtype=np.float64)
    diff = p[:, None, :] - p[None, :, :]
    d = np.sqrt((diff * diff).sum(-1))
    np.fill_diagonal(d, 0.0)
    return d


def structure_matrices(m: Molecule) -> tuple[np.ndarray, np.ndarray]:
    """Return (A, D): bond-order adjacency and distances.

    D is Euclidean when the molecule carries coordinates, otherwise hop counts.
    """
    d = euclidean_distances(m.coords) if m.coords is not None else hop_distances(m)
    return adjacency(m), d
