"""Pure-numpy versions of the bitset kernels in ``_xorkernel.pyx``."""
import numpy as np


def evaluate_shared(atoms, prices, bundles):
    atoms = np.asarray(atoms, dtype=np.uint64)
    prices = np.asarray(prices, dtype=np.float64)
    bundles = np.asarray(bundles, dtype=np.uint64)
    if bundles.shape[1] != atoms.shape[2]:
        raise ValueError(
            f"word count mismatch: atoms {atoms.shape[2]}, bundles {bundles.shape[1]}")
    n, B = atoms.shape[0], bundles.shape[0]
    out = np.zeros((n, B))
    # chunk over valuations to bound the (n, A, B, W) temporary
    step = max(1, 2_000_000 // max(1, atoms.shape[1] * B * atoms.shape[2]))
    miss = ~bundles
    for lo in range(0, n, step):
        a = atoms[lo:lo + step]
        fits = ((a[:, :, None, :] & miss[None, None, :, :]) == 0).all(axis=-1)
        p = prices[lo:lo + step]
        out[lo:lo + step] = np.where(fits, p[:, :, None], 0.0).max(axis=1, initial=0.0)
    return out


def evaluate_paired(atoms, prices, bundles):
    atoms = np.asarray(atoms, dtype=np.uint64)
    prices = np.asarray(prices, dtype=np.float64)
    bundles = np.asarray(bundles, dtype=np.uint64)
    if bundles.shape[0] != atoms.shape[0] or bundles.shape[2] != atoms.shape[2]:
        raise ValueError("paired bundles must have shape (n, B, words)")
    fits = ((atoms[:, :, None, :] & ~bundles[:, None, :, :]) == 0).all(axis=-1)
    return np.where(fits, prices[:, :, None], 0.0).max(axis=1, initial=0.0)
