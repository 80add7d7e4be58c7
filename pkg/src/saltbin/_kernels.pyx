# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled decoders for packed weight planes.

Packed planes are expanded straight to float64 through 256-entry lookup
tables, then the product runs through BLAS.
"""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()

cdef double SIGN_LUT[256][8]
cdef double NIB_LUT[256][2]


cdef void _build_tables() noexcept:
    cdef int b, k
    for b in range(256):
        for k in range(8):
            SIGN_LUT[b][k] = 1.0 if (b >> k) & 1 else -1.0
        NIB_LUT[b][0] = b & 15
        NIB_LUT[b][1] = b >> 4


_build_tables()


def decode_signs(const unsigned char[:, ::1] plane, Py_ssize_t n):
    """Expand an LSB-first sign plane to a (rows, n) matrix of +-1."""
    cdef Py_ssize_t rows = plane.shape[0], nbytes = plane.shape[1]
    cdef Py_ssize_t r, jb, full = n // 8, tail = n - 8 * (n // 8)
    out_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    if rows == 0 or n == 0:
        return out_arr
    with nogil:
        for r in range(rows):
            for jb in range(full):
                memcpy(&out[r, 8 * jb], &SIGN_LUT[plane[r, jb]][0], 8 * sizeof(double))
            if tail:
                memcpy(&out[r, 8 * full], &SIGN_LUT[plane[r, full]][0], tail * sizeof(double))
    return out_arr


def decode_nibbles(const unsigned char[:, ::1] nib, Py_ssize_t n):
    """Expand low-nibble-first 4-bit codes to a (rows, n) float matrix."""
    cdef Py_ssize_t rows = nib.shape[0]
    cdef Py_ssize_t r, jb, full = n // 2
    out_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    if rows == 0 or n == 0:
        return out_arr
    with nogil:
        for r in range(rows):
            for jb in range(full):
                memcpy(&out[r, 2 * jb], &NIB_LUT[nib[r, jb]][0], 2 * sizeof(double))
            if n & 1:
                out[r, n - 1] = NIB_LUT[nib[r, full]][0]
    return out_arr


def sign_matmul(u, plane, Py_ssize_t n):
    """``u @ S`` where ``S[r, j] = +1`` if bit ``j`` of row ``r`` is set, else -1."""
    return u @ decode_signs(plane, n)


def nibble_matmul(v, nib, Py_ssize_t n):
    """``v @ C`` where ``C`` holds 4-bit codes packed low-nibble-first."""
    return v @ decode_nibbles(nib, n)
