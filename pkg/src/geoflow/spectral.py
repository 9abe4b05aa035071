"""FFT-diagonal smoothing operators and spectral convolution.

The metric operator L = (-alpha * Lap + Id)^c and its inverse K are diagonal
in Fourier space. The Laplacian symbol uses the 2nd-order periodic stencil in
grid units (h = 1 cell), the convention of the registration literature the
default alpha/c values come from; physical spacing plays no role here.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import torch

from .grid import DTYPE, GridSpec, VectorField, same_grid


@dataclass(frozen=True)
class FourierMultiplier:
    """Diagonal spectral coefficients of L (and 1/L for K) on a grid."""

    grid: GridSpec
    alpha: float
    exponent: int
    coefficients: torch.Tensor  # L coefficients, shape grid.dims, all >= 1

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.exponent < 1:
            raise ValueError(f"exponent must be a positive integer, got {self.exponent}")

    @property
    def inverse_coefficients(self) -> torch.Tensor:
        return 1.0 / self.coefficients


def _neg_laplacian_symbol(dims: tuple[int, ...]) -> torch.Tensor:
    """-Lap stencil symbol, sum over axes of 2(1 - cos(2 pi k / n)), in grid units."""
    parts = []
    for n in dims:
        k = torch.arange(n, dtype=DTYPE)
        parts.append(2.0 * (1.0 - torch.cos(2.0 * torch.pi * k / n)))
    mesh = torch.meshgrid(*parts, indexing="ij")
    out = mesh[0]
    for m in mesh[1:]:
        out = out + m
    return out


@functools.lru_cache(maxsize=32)
def _cached_multiplier(dims: tuple[int, ...], spacing: tuple[float, ...], alpha: float,
                       exponent: int) -> FourierMultiplier:
    grid = GridSpec(dims, spacing)
    coeff = (1.0 + alpha * _neg_laplacian_symbol(dims)) ** exponent
    return FourierMultiplier(grid, alpha, exponent, coeff)


def laplacian_multiplier(grid: GridSpec, alpha: float = 3.0, exponent: int = 3) -> FourierMultiplier:
    """Build (and cache) the multiplier for L = (-alpha * Lap + Id)^exponent."""
    return _cached_multiplier(grid.dims, grid.spacing, float(alpha), int(exponent))


def apply_multiplier_t(x: torch.Tensor, coeff: torch.Tensor, d: int) -> torch.Tensor:
    """Multiply the last d axes of x by a real spectral symbol; output real."""
    dims = tuple(range(x.dim() - d, x.dim()))
    return torch.fft.ifftn(torch.fft.fftn(x, dim=dims) * coeff, dim=dims).real


def apply_L(v: VectorField, mult: FourierMultiplier) -> VectorField:
    """Map velocity to momentum: m = L v."""
    same_grid(v, mult)
    return VectorField(v.grid, apply_multiplier_t(v.components, mult.coefficients, v.grid.d))


def apply_K(m: VectorField, mult: FourierMultiplier) -> VectorField:
    """Map momentum back to velocity: v = K m = L^{-1} m."""
    same_grid(m, mult)
    return VectorField(m.grid, apply_multiplier_t(m.components, mult.inverse_coefficients, m.grid.d))


def smooth_t(x: torch.Tensor, mult: FourierMultiplier) -> torch.Tensor:
    """Apply K channelwise to (..., *dims)."""
    return apply_multiplier_t(x, mult.inverse_coefficients, mult.grid.d)


def smooth(values: torch.Tensor, mult: FourierMultiplier) -> torch.Tensor:
    """K-smooth a multi-channel field (..., *grid.dims)."""
    if tuple(values.shape[-mult.grid.d:]) != mult.grid.dims:
        raise ValueError(
            f"field spatial shape {tuple(values.shape[-mult.grid.d:])} "
            f"does not match multiplier grid {mult.grid.dims}"
        )
    return smooth_t(torch.as_tensor(values, dtype=DTYPE), mult)


def mode_indices(n: int, k_max: int) -> torch.Tensor:
    """FFT bin indices retained per axis: signed frequencies 0..k_max then -k_max..-1.

    The nonneg-then-negative ordering keeps kernels transferable across grid
    sizes (same signed frequency, same weight slot). Nyquist is kept once.
    """
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    if k_max > n // 2:
        raise ValueError(f"k_max={k_max} exceeds {n}//2 for axis size {n}")
    pos = list(range(0, k_max + 1))
    neg = [n - k for k in range(k_max, 0, -1) if n - k > k_max]
    return torch.tensor(pos + neg, dtype=torch.long)


@dataclass(frozen=True)
class SpectralKernel:
    """Truncated-mode convolution kernel: a complex C_in x C_out matrix per frequency.

    weights are stored as a real tensor (C_in, C_out, *mode_dims, 2) holding
    interleaved re/im; mode axes follow the mode_indices ordering.
    """

    k_max: tuple[int, ...]
    weights: torch.Tensor

    def __post_init__(self):
        if self.weights.shape[-1] != 2:
            raise ValueError("kernel weights must have a trailing re/im axis of size 2")
        if not torch.isfinite(self.weights).all():
            raise ValueError("kernel weights must be finite")

    @property
    def channels_in(self) -> int:
        return self.weights.shape[0]

    @property
    def channels_out(self) -> int:
        return self.weights.shape[1]


def identity_kernel(channels: int, k_max: tuple[int, ...], dims: tuple[int, ...]) -> SpectralKernel:
    """Identity channel map at every retained frequency (for tests and reductions)."""
    mode_dims = tuple(len(mode_indices(n, k)) for n, k in zip(dims, k_max))
    w = torch.zeros((channels, channels) + mode_dims + (2,), dtype=DTYPE)
    eye = torch.eye(channels, dtype=DTYPE)
    w[..., 0] = eye.reshape(channels, channels, *([1] * len(mode_dims)))
    return SpectralKernel(tuple(k_max), w)


_EINSUM = {2: "nixy,ioxy->noxy", 3: "nixyz,ioxyz->noxyz"}


def spectral_conv_t(x: torch.Tensor, kernel: SpectralKernel) -> torch.Tensor:
    """Spectral convolution on (N, C_in, *dims) -> (N, C_out, *dims).

    FFT, per-retained-frequency channel mixing, zero elsewhere, inverse FFT,
    real part. Linear in x; differentiable in x and the kernel weights.
    """
    d = len(kernel.k_max)
    if x.shape[1] != kernel.channels_in:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.channels_in}")
    dims = tuple(x.shape[-d:])
    spatial = tuple(range(x.dim() - d, x.dim()))
    xf = torch.fft.fftn(x, dim=spatial)

    idx = [mode_indices(n, k) for n, k in zip(dims, kernel.k_max)]
    block = xf
    for a, ia in enumerate(idx):
        block = block.index_select(2 + a, ia)
    wc = torch.view_as_complex(kernel.weights.contiguous())
    if tuple(wc.shape[2:]) != tuple(b.shape[0] for b in idx):
        raise ValueError(
            f"kernel mode shape {tuple(wc.shape[2:])} does not match retained modes "
            f"{tuple(b.shape[0] for b in idx)} for dims {dims}"
        )
    mixed = torch.einsum(_EINSUM[d], block, wc)

    out_f = torch.zeros(x.shape[0], kernel.channels_out, *dims, dtype=xf.dtype)
    mesh = torch.meshgrid(*idx, indexing="ij")
    out_f[(slice(None), slice(None)) + tuple(mesh)] = mixed
    return torch.fft.ifftn(out_f, dim=spatial).real


def spectral_conv(u: torch.Tensor, kernel: SpectralKernel) -> torch.Tensor:
    """Spectral convolution of a multi-channel field (C_in, *dims) -> (C_out, *dims)."""
    out = spectral_conv_t(torch.as_tensor(u, dtype=DTYPE).unsqueeze(0), kernel)
    return out[0]
