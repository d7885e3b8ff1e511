"""Backend selection for the XOR evaluation kernels.

The compiled Cython extension is used when it imports; otherwise the numpy
fallback. Set ``BUNDLEFLOW_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _xorfallback as fallback

compiled = None
if os.environ.get("BUNDLEFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _xorkernel as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else fallback
BACKEND = "cython" if compiled is not None else "numpy"


def words_for(m):
    return (m + 63) // 64


def pack_bits(bits):
    """Pack a (..., m) 0/1 array into (..., ceil(m/64)) little-endian uint64 words."""
    bits = np.asarray(bits)
    m = bits.shape[-1]
    W = words_for(m)
    padded = np.zeros(bits.shape[:-1] + (W * 64,), dtype=np.uint8)
    padded[..., :m] = bits != 0
    packed = np.packbits(padded, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def unpack_bits(words, m):
    words = np.ascontiguousarray(np.asarray(words, dtype="<u8"))
    raw = words.view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")
    return bits[..., :m].astype(np.uint8)


def evaluate_shared(atoms, prices, bundles):
    """Value of every valuation on every bundle.

    atoms: (n, A, W) uint64, prices: (n, A), bundles: (B, W) uint64 -> (n, B).
    Padding atoms must carry price 0.
    """
    return _impl.evaluate_shared(
        np.ascontiguousarray(atoms, dtype=np.uint64),
        np.ascontiguousarray(prices, dtype=np.float64),
        np.ascontiguousarray(bundles, dtype=np.uint64),
    )


def evaluate_paired(atoms, prices, bundles):
    """Valuation ``i`` on bundles ``bundles[i]``: (n, B, W) -> (n, B)."""
    return _impl.evaluate_paired(
        np.ascontiguousarray(atoms, dtype=np.uint64),
        np.ascontiguousarray(prices, dtype=np.float64),
        np.ascontiguousarray(bundles, dtype=np.uint64),
    )
