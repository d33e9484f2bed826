"""Real-input discrete Fourier transform as a differentiable primitive.

The default path multiplies by cached cosine/sine matrices (n <= a few hundred
at the block sizes used here).  ``method="radix2"`` runs an iterative
Cooley-Tukey FFT in the forward pass and shares the matrix adjoint for the
backward pass; both paths must agree to ~1e-9 relative.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import ops
from .core import Tensor, as_tensor, make_node


@lru_cache(maxsize=64)
def dft_matrices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """(n, n//2+1) matrices C, S with re = x @ C, im = x @ S."""
    t = np.arange(n)[:, None]
    k = np.arange(n // 2 + 1)[None, :]
    ang = 2.0 * np.pi * ((t * k) % n) / n
    cos_m, sin_m = np.cos(ang), -np.sin(ang)
    cos_m.setflags(write=False)
    sin_m.setflags(write=False)
    return cos_m, sin_m


def _fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 FFT along the last axis (complex output, full spectrum)."""
    n = x.shape[-1]
    if n & (n - 1):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for i in range(n):
        rev[i] = int(format(i, f"0{bits}b")[::-1], 2) if bits else 0
    a = x[..., rev].astype(np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        a = a.reshape(a.shape[:-1] + (n // size, size))
        even = a[..., :half].copy()
        odd = a[..., half:] * tw
        a[..., :half] = even + odd
        a[..., half:] = even - odd
        a = a.reshape(a.shape[:-2] + (n,))
        size *= 2
    return a


def rdft(signal, method: str = "direct") -> tuple[Tensor, Tensor]:
    """Real and imaginary parts of bins 0..n//2 of the DFT along the last axis."""
    x = as_tensor(signal)
    n = x.shape[-1]
    if n < 2:
        raise ValueError(f"rdft: need at least 2 samples, got {n}")
    if x.ndim == 1:
        re, im = rdft(ops.reshape(x, (1, n)), method=method)
        return ops.reshape(re, (n // 2 + 1,)), ops.reshape(im, (n // 2 + 1,))
    cos_m, sin_m = dft_matrices(n)
    if method == "direct":
        return ops.matmul(x, cos_m), ops.matmul(x, sin_m)
    if method != "radix2":
        raise ValueError(f"rdft: unknown method {method!r}")
    spec = _fft_radix2(x.data)[..., : n // 2 + 1]
    re = make_node(spec.real.copy(), (x,), lambda g: (g @ cos_m.T,), "rdft_re")
    im = make_node(spec.imag.copy(), (x,), lambda g: (g @ sin_m.T,), "rdft_im")
    return re, im


def full_spectrum(signal: np.ndarray) -> np.ndarray:
    """All n complex DFT coefficients by the direct O(n^2) sum (no gradient)."""
    x = np.asarray(signal, dtype=np.float64)
    n = x.shape[-1]
    t = np.arange(n)
    w = np.exp(-2j * np.pi * ((t[:, None] * t[None, :]) % n) / n)
    return x @ w


def dft_magnitude(signal, window=None, method: str = "direct") -> Tensor:
    """|DFT(signal * window)| at bins 0..n//2; differentiable in signal and window."""
    x = as_tensor(signal)
    if x.shape[-1] < 2:
        raise ValueError(f"dft_magnitude: need n >= 2, got shape {x.shape}")
    if window is not None:
        window = as_tensor(window)
        if window.shape[-1] != x.shape[-1]:
            raise ValueError(f"dft_magnitude: window shape {window.shape} does not match signal {x.shape}")
        x = ops.mul(x, window)
    re, im = rdft(x, method=method)
    return ops.hypot(re, im)
