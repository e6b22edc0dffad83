"""3D discrete Fourier transforms for k-space artifact synthesis.

Forward transform is unnormalized, the inverse carries the full 1/S³ factor.
Power-of-two sides use a vectorized radix-2 Cooley-Tukey pass per axis;
other sides fall back to the dense DFT-matrix product per axis.
"""
from __future__ import annotations

import numpy as np


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_rows(a: np.ndarray, sign: float) -> np.ndarray:
    """Radix-2 DIT transform of every row of an (R, n) array, n a power of two."""
    rows, n = a.shape
    if n == 1:
        return a.astype(np.complex128)
    y = a[:, _bit_reversal(n)].astype(np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        y = y.reshape(rows, n // size, size)
        even = y[:, :, :half]
        odd = y[:, :, half:] * tw
        y = np.concatenate((even + odd, even - odd), axis=2).reshape(rows, n)
        size *= 2
    return y


def _dft_rows(a: np.ndarray, sign: float) -> np.ndarray:
    """Dense-matrix DFT of every row; fallback for non power-of-two sizes."""
    n = a.shape[-1]
    j = np.arange(n)
    f = np.exp(sign * 2j * np.pi * np.outer(j, j) / n)
    return a.astype(np.complex128) @ f


def _transform_axis(a: np.ndarray, axis: int, sign: float) -> np.ndarray:
    moved = np.moveaxis(a, axis, -1)
    shape = moved.shape
    flat = moved.reshape(-1, shape[-1])
    if _is_pow2(shape[-1]):
        out = _fft_rows(flat, sign)
    else:
        out = _dft_rows(flat, sign)
    return np.moveaxis(out.reshape(shape), -1, axis)


def dft3(v: np.ndarray) -> np.ndarray:
    """Unnormalized forward 3D DFT of an (S, S, S) array."""
    if v.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {v.shape}")
    out = np.asarray(v)
    for axis in range(3):
        out = _transform_axis(out, axis, sign=-1.0)
    return out


def idft3(k: np.ndarray) -> np.ndarray:
    """Inverse 3D DFT with 1/S³ normalization; returns a complex array."""
    if k.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {k.shape}")
    out = np.asarray(k)
    for axis in range(3):
        out = _transform_axis(out, axis, sign=1.0)
    return out / out.size
