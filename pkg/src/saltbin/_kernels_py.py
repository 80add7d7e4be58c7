"""numpy reference versions of the compiled kernels."""
import numpy as np


def decode_signs(plane, n):
    bits = np.unpackbits(plane, axis=1, bitorder="little")[:, :n]
    return 2.0 * bits - 1.0


def decode_nibbles(nib, n):
    codes = np.empty((nib.shape[0], 2 * nib.shape[1]), dtype=np.float64)
    codes[:, 0::2] = nib & 0x0F
    codes[:, 1::2] = nib >> 4
    return codes[:, :n]


def sign_matmul(u, plane, n):
    return u @ decode_signs(plane, n)


def nibble_matmul(v, nib, n):
    return v @ decode_nibbles(nib, n)
