# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Bitset kernels for XOR valuation evaluation.

Bundles and atoms are packed into little-endian uint64 words; an atom fits
inside a bundle iff ``atom & ~bundle == 0`` word by word.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t

cnp.import_array()


def evaluate_shared(const uint64_t[:, :, ::1] atoms,
                    const double[:, ::1] prices,
                    const uint64_t[:, ::1] bundles):
    """Values of ``n`` valuations on the same ``B`` bundles -> (n, B)."""
    cdef Py_ssize_t n = atoms.shape[0], A = atoms.shape[1], W = atoms.shape[2]
    cdef Py_ssize_t B = bundles.shape[0]
    if bundles.shape[1] != W:
        raise ValueError(f"word count mismatch: atoms {W}, bundles {bundles.shape[1]}")
    out = np.zeros((n, B), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef Py_ssize_t i, a, b, w
    cdef double best, p
    cdef bint fits
    with nogil:
        for i in range(n):
            for b in range(B):
                best = 0.0
                for a in range(A):
                    p = prices[i, a]
                    if p <= best:
                        continue
                    fits = True
                    for w in range(W):
                        if atoms[i, a, w] & ~bundles[b, w]:
                            fits = False
                            break
                    if fits:
                        best = p
                res[i, b] = best
    return out


def evaluate_paired(const uint64_t[:, :, ::1] atoms,
                    const double[:, ::1] prices,
                    const uint64_t[:, :, ::1] bundles):
    """Valuation ``i`` on its own bundles ``bundles[i]`` -> (n, B)."""
    cdef Py_ssize_t n = atoms.shape[0], A = atoms.shape[1], W = atoms.shape[2]
    cdef Py_ssize_t B = bundles.shape[1]
    if bundles.shape[0] != n or bundles.shape[2] != W:
        raise ValueError("paired bundles must have shape (n, B, words)")
    out = np.zeros((n, B), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef Py_ssize_t i, a, b, w
    cdef double best, p
    cdef bint fits
    with nogil:
        for i in range(n):
            for b in range(B):
                best = 0.0
                for a in range(A):
                    p = prices[i, a]
                    if p <= best:
                        continue
                    fits = True
                    for w in range(W):
                        if atoms[i, a, w] & ~bundles[i, b, w]:
                            fits = False
                            break
                    if fits:
                        best = p
                res[i, b] = best
    return out
