"""Geodesic neural operator: rolls latent codes along the geodesic.

One advance step is Q o (J evolution layers) o P with tied weights across
time. Each evolution layer mixes a pointwise linear map with a truncated-mode
spectral convolution and applies the smoothed activation
sigma(x) = K(GeLU(x)), which keeps the latent evolution band-limited.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import DTYPE, GridSpec
from .regnet import LatentFeature, backward_gradients
from .spectral import SpectralKernel, laplacian_multiplier, mode_indices, smooth_t, spectral_conv_t

__all__ = [
    "EvolutionLayer",
    "GeodesicOperator",
    "lift",
    "evolution_step",
    "advance",
    "rollout",
    "gno_backward",
]


class RolloutBlowupError(RuntimeError):
    """Raised when a rollout produces non-finite latents."""

    def __init__(self, step: int):
        super().__init__(f"rollout produced non-finite latents at step {step}")
        self.step = step


def _sigma_multiplier(dims: tuple[int, ...], alpha: float, exponent: int):
    # the smoothing symbol only depends on the latent dims (grid units)
    return laplacian_multiplier(GridSpec(dims, tuple(1.0 for _ in dims)), alpha, exponent)


class EvolutionLayer(nn.Module):
    """u -> sigma(W u + H * u) with a pointwise mixer W and spectral kernel H."""

    def __init__(self, channels: int, k_max: tuple[int, ...], latent_dims: tuple[int, ...],
                 mix_gain: float = 1.0):
        super().__init__()
        ndim = len(latent_dims)
        conv = {2: nn.Conv2d, 3: nn.Conv3d}[ndim]
        self.mix = conv(channels, channels, 1)
        # bias the mixer toward a identity map: GeLU halves small signals, so
        # the identity bias keeps the advance map from collapsing at init
        with torch.no_grad():
            self.mix.weight.add_(
                mix_gain * torch.eye(channels).reshape(channels, channels, *([1] * ndim))
            )
        self.k_max = tuple(k_max)
        mode_dims = tuple(len(mode_indices(n, k)) for n, k in zip(latent_dims, k_max))
        scale = 1.0 / (channels * channels)
        self.kernel_weights = nn.Parameter(
            scale * torch.randn(channels, channels, *mode_dims, 2)
        )

    def kernel(self) -> SpectralKernel:
        return SpectralKernel(self.k_max, self.kernel_weights)

    def forward(self, u: torch.Tensor, sigma_mult) -> torch.Tensor:
        pre = self.mix(u) + spectral_conv_t(u, self.kernel())
        return smooth_t(F.gelu(pre), sigma_mult)


class GeodesicOperator(nn.Module):
    """Latent geodesic evolution z_{v_t} -> z_{v_{t+1}}, weights shared across steps."""

    def __init__(self, latent_channels: int = 8, hidden_channels: int = 16, layers: int = 4,
                 k_max: int = 2, latent_dims: tuple[int, ...] = (8, 8),
                 alpha_sigma: float = 3.0, exponent_sigma: int = 3, seed: int = 0):
        super().__init__()
        if layers < 1:
            raise ValueError(f"layers must be >= 1, got {layers}")
        ndim = len(latent_dims)
        conv = {2: nn.Conv2d, 3: nn.Conv3d}[ndim]
        torch.manual_seed(seed)
        self.lift_map = conv(latent_channels, hidden_channels, 1)
        self.project_map = conv(hidden_channels, latent_channels, 1)
        kmax = (k_max,) * ndim
        self.layers = nn.ModuleList(
            EvolutionLayer(hidden_channels, kmax, latent_dims) for _ in range(layers)
        )
        self.alpha_sigma = alpha_sigma
        self.exponent_sigma = exponent_sigma
        self.double()

    def sigma_multiplier(self, dims: tuple[int, ...]):
        return _sigma_multiplier(dims, self.alpha_sigma, self.exponent_sigma)

    def advance_batch(self, z: torch.Tensor) -> torch.Tensor:
        """(N, C_z, *lat) -> (N, C_z, *lat): one geodesic step in latent space."""
        mult = self.sigma_multiplier(tuple(z.shape[2:]))
        u = self.lift_map(z)
        for layer in self.layers:
            u = layer(u, mult)
        return self.project_map(u)

    def rollout_batch(self, z0: torch.Tensor, steps: int) -> list[torch.Tensor]:
        """[z_0, z_1, ..., z_steps] with shared weights at every step."""
        out = [z0]
        z = z0
        for t in range(steps):
            z = self.advance_batch(z)
            if not torch.isfinite(z).all():
                raise RolloutBlowupError(t + 1)
            out.append(z)
        return out


def lift(z: LatentFeature, gno: GeodesicOperator) -> torch.Tensor:
    """Pointwise channel lift C_z -> C_h; spatial dims preserved."""
    if z.channels != gno.lift_map.in_channels:
        raise ValueError(f"latent has {z.channels} channels, lift expects "
                         f"{gno.lift_map.in_channels}")
    return gno.lift_map(z.values.unsqueeze(0))[0]


def evolution_step(u: torch.Tensor, layer: EvolutionLayer, gno: GeodesicOperator) -> torch.Tensor:
    """Apply one evolution sub-layer to a hidden field (C_h, *lat)."""
    if u.shape[0] != layer.mix.in_channels:
        raise ValueError(f"hidden field has {u.shape[0]} channels, layer expects "
                         f"{layer.mix.in_channels}")
    mult = gno.sigma_multiplier(tuple(u.shape[1:]))
    return layer(u.unsqueeze(0), mult)[0]


def advance(z: LatentFeature, gno: GeodesicOperator) -> LatentFeature:
    """One latent geodesic step; output shape equals input shape."""
    out = gno.advance_batch(z.values.unsqueeze(0))[0]
    return LatentFeature(z.grid, out)


def rollout(z0: LatentFeature, gno: GeodesicOperator, steps: int) -> list[LatentFeature]:
    """Latent trajectory [z_0 ... z_steps]; element 0 is z0 itself."""
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    zs = gno.rollout_batch(z0.values.unsqueeze(0), steps)
    return [LatentFeature(z0.grid, z[0]) for z in zs]


def gno_backward(loss: torch.Tensor, gno: GeodesicOperator,
                 inputs: tuple[torch.Tensor, ...] = ()) -> tuple[dict, tuple]:
    """Exact reverse-mode gradients through the full operator (FFTs included)."""
    return backward_gradients(loss, gno, inputs)
