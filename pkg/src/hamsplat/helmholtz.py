"""Spectral Helmholtz-Hodge decomposition on periodic 3D grids.

For each nonzero wavevector k the conservative part is the projection of
the field's Fourier coefficient onto k,

    Fc_hat(k) = k (k . F_hat(k)) / |k|^2,     Fs_hat = F_hat - Fc_hat,

so Fc is curl-free and Fs divergence-free by construction.  The k = 0 mode
(a constant field, both curl- and divergence-free) is returned separately:
on a torus the decomposition is only unique up to this constant.

The FFT is an in-repo iterative radix-2 transform, so the module carries no
numerical dependencies beyond the array container; grid sizes must be
powers of two (n >= 4).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GridField:
    """3-vector samples on a periodic n^3 lattice over [0, 1)^3."""

    values: np.ndarray   # (n, n, n, 3)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        v = self.values
        if v.ndim != 4 or v.shape[3] != 3 or not (v.shape[0] == v.shape[1] == v.shape[2]):
            raise ValueError(f"grid field must be (n, n, n, 3) cubic, got {v.shape}")
        n = v.shape[0]
        if n < 4:
            raise ValueError(f"grid size must be at least 4, got {n}")
        if n & (n - 1):
            raise ValueError(f"grid size must be a power of two for the radix-2 FFT, got {n}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def max_norm(self) -> float:
        return float(np.max(np.abs(self.values)))


def inner(a: GridField, b: GridField) -> float:
    """Lattice inner product sum_x a(x) . b(x)."""
    return float(np.sum(a.values * b.values))


# ---------------------------------------------------------------------------
# radix-2 FFT
# ---------------------------------------------------------------------------

def _fft_last_axis(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Iterative Cooley-Tukey along the last axis; length must be 2^k."""
    n = a.shape[-1]
    if n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    out = np.array(a, dtype=np.complex128)
    # bit-reversal permutation
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    bits = n.bit_length() - 1
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    out = out[..., rev]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(out.shape[:-1] + (n // size, size))
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        size *= 2
    if inverse:
        out /= n
    return out


def _fft3(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """3D transform by running the 1D FFT along each axis."""
    out = np.asarray(a, dtype=np.complex128)
    for axis in range(3):
        out = np.moveaxis(_fft_last_axis(np.moveaxis(out, axis, -1), inverse), -1, axis)
    return out


def _wavenumbers(n: int) -> np.ndarray:
    """Integer frequencies 0, 1, ..., n/2-1, -n/2, ..., -1."""
    k = np.arange(n)
    k[k > n // 2 - 1] -= n
    return k.astype(np.float64)


# ---------------------------------------------------------------------------
# decomposition and differential operators
# ---------------------------------------------------------------------------

def decompose(f: GridField):
    """Split a periodic field into (conservative, solenoidal, constant) parts."""
    n = f.n
    fh = np.stack([_fft3(f.values[..., c]) for c in range(3)], axis=-1)
    k1 = _wavenumbers(n)
    kx, ky, kz = np.meshgrid(k1, k1, k1, indexing="ij")
    kvec = np.stack([kx, ky, kz], axis=-1)
    k2 = np.sum(kvec * kvec, axis=-1)
    k2[0, 0, 0] = 1.0   # the zero mode is handled separately
    dot = np.sum(kvec * fh, axis=-1)
    fc_hat = kvec * (dot / k2)[..., None]
    fc_hat[0, 0, 0, :] = 0.0
    fs_hat = fh - fc_hat
    f0 = fh[0, 0, 0, :].real / n ** 3   # unnormalized forward FFT: bin 0 is n^3 * mean
    fs_hat[0, 0, 0, :] = 0.0

    fc = np.stack([_fft3(fc_hat[..., c], inverse=True).real for c in range(3)], axis=-1)
    fs = np.stack([_fft3(fs_hat[..., c], inverse=True).real for c in range(3)], axis=-1)
    return GridField(fc), GridField(fs), f0


def divergence(f: GridField) -> np.ndarray:
    """Central-difference divergence, periodic wrap, spacing 1/n."""
    v = f.values
    h = 1.0 / f.n
    out = np.zeros(v.shape[:3])
    for axis in range(3):
        out += (np.roll(v[..., axis], -1, axis=axis)
                - np.roll(v[..., axis], 1, axis=axis)) / (2.0 * h)
    return out


def curl(f: GridField) -> GridField:
    """Central-difference curl, periodic wrap, spacing 1/n."""
    v = f.values
    h = 1.0 / f.n

    def d(comp, axis):
        return (np.roll(v[..., comp], -1, axis=axis)
                - np.roll(v[..., comp], 1, axis=axis)) / (2.0 * h)

    cx = d(2, 1) - d(1, 2)
    cy = d(0, 2) - d(2, 0)
    cz = d(1, 0) - d(0, 1)
    return GridField(np.stack([cx, cy, cz], axis=-1))


def lattice(n: int):
    """Coordinate arrays (x, y, z) of the n^3 lattice over [0, 1)^3."""
    g = np.arange(n) / n
    return np.meshgrid(g, g, g, indexing="ij")


def random_band_limited(n: int, seed: int = 0, modes=((1, 0, 0), (0, 1, 0), (0, 0, 1),
                                                      (1, 1, 0), (0, 1, 1), (1, 0, 1))) -> GridField:
    """Random field built from low-frequency sine/cosine modes.

    Component magnitudes of every wavevector stay in {0, 1}, where central
    differences agree with the spectral derivative up to roundoff.
    """
    rng = np.random.default_rng(seed)
    x, y, z = lattice(n)
    vals = np.zeros((n, n, n, 3))
    for (ka, kb, kc) in modes:
        phase = 2.0 * np.pi * (ka * x + kb * y + kc * z)
        for c in range(3):
            vals[..., c] += rng.normal() * np.sin(phase) + rng.normal() * np.cos(phase)
    return GridField(vals)
