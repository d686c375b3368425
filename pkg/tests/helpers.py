"""Shared test helpers."""
import numpy as np
import torch
from scipy.spatial.transform import Rotation

from d3mes.molgraph import Bond, Molecule


def random_rotation(seed) -> np.ndarray:
    return Rotation.random(random_state=seed).as_matrix()


def torch_rotation(seed, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(random_rotation(seed), dtype=dtype)


def chain(symbols, orders=None, spacing=1.5):
    n = len(symbols)
    orders = orders or [1] * (n - 1)
    pos = np.array([[k * spacing, 0.0, 0.0] for k in range(n)])
    return Molecule(tuple(symbols), pos, tuple(Bond(k, k + 1, o) for k, o in enumerate(orders)))


def ring(symbols, orders=None, radius=1.5):
    n = len(symbols)
    orders = orders or [1] * n
    ang = 2 * np.pi * np.arange(n) / n
    pos = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(n)], axis=1)
    return Molecule(tuple(symbols), pos, tuple(Bond(k, (k + 1) % n, o) for k, o in enumerate(orders)))


def permute(m: Molecule, perm) -> Molecule:
    """Atom ``k`` of the result is atom ``perm[k]`` of ``m``."""
    inv = np.argsort(perm)
    return m.replace(
        symbols=tuple(m.symbols[p] for p in perm),
        positions=m.positions[list(perm)],
        bonds=tuple(Bond(int(inv[b.i]), int(inv[b.j]), b.order) for b in m.bonds),
    )
