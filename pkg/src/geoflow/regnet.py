"""Registration encoder/decoder: image pair -> latent code -> velocity field.

A small strided-convolution stack with circular padding (the domain is a
torus): two stride-2 encoder convs take the stacked (S, T) pair to a latent
grid at 1/4 resolution, two upsample+conv decoder layers map latent codes
back to a full-resolution velocity field. The final decoder layer is linear
so velocities can take either sign.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import DTYPE, GridSpec, ScalarField, VectorField, same_grid


@dataclass(frozen=True)
class LatentFeature:
    """Latent deformation code on the 1/4-resolution grid."""

    grid: GridSpec
    values: torch.Tensor  # (channels, *grid.dims)

    def __post_init__(self):
        if tuple(self.values.shape[1:]) != self.grid.dims:
            raise ValueError(
                f"latent spatial shape {tuple(self.values.shape[1:])} "
                f"does not match grid {self.grid.dims}"
            )

    @property
    def channels(self) -> int:
        return self.values.shape[0]


def latent_grid(grid: GridSpec) -> GridSpec:
    """The 1/4-resolution grid carrying latent codes; extent is preserved."""
    if any(n % 4 != 0 for n in grid.dims):
        raise ValueError(f"grid dims must be divisible by 4, got {grid.dims}")
    return GridSpec(tuple(n // 4 for n in grid.dims),
                    tuple(h * 4 for h in grid.spacing))


def _conv(ndim: int):
    return {2: nn.Conv2d, 3: nn.Conv3d}[ndim]


class RegistrationNet(nn.Module):
    """Encoder to latent deformation codes plus decoder to velocity fields.

    The decoder ends with a fixed K-smoothing (still linear overall): decoded
    velocities must be safe inputs for Euler shooting oracles, and raw conv
    outputs carry enough high-frequency content to destabilize EPDiff.
    """

    def __init__(self, ndim: int = 2, latent_channels: int = 8, hidden_channels: int = 16,
                 seed: int = 0, alpha_smooth: float = 3.0, exponent_smooth: int = 3):
        super().__init__()
        if ndim not in (2, 3):
            raise ValueError(f"ndim must be 2 or 3, got {ndim}")
        self.ndim = ndim
        self.latent_channels = latent_channels
        self.alpha_smooth = alpha_smooth
        self.exponent_smooth = exponent_smooth
        conv = _conv(ndim)
        torch.manual_seed(seed)
        self.enc1 = conv(2, hidden_channels, 3, stride=2, padding=1, padding_mode="circular")
        self.enc2 = conv(hidden_channels, latent_channels, 3, stride=2, padding=1,
                         padding_mode="circular")
        self.dec1 = conv(latent_channels, hidden_channels, 3, padding=1, padding_mode="circular")
        self.dec2 = conv(hidden_channels, ndim, 3, padding=1, padding_mode="circular")
        self.double()

    def encode_batch(self, pair: torch.Tensor) -> torch.Tensor:
        """(N, 2, *dims) -> (N, C_z, *dims/4)."""
        h = F.gelu(self.enc1(pair))
        return F.gelu(self.enc2(h))

    def decode_batch(self, z: torch.Tensor) -> torch.Tensor:
        """(N, C_z, *dims/4) -> (N, ndim, *dims); final layer linear."""
        from .spectral import laplacian_multiplier, smooth_t

        h = F.interpolate(z, scale_factor=2, mode="nearest")
        h = F.gelu(self.dec1(h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        v = self.dec2(h)
        mult = laplacian_multiplier(GridSpec(tuple(v.shape[2:]), tuple(1.0 for _ in v.shape[2:])),
                                    self.alpha_smooth, self.exponent_smooth)
        return smooth_t(v, mult)


def encode(source: ScalarField, target: ScalarField, net: RegistrationNet) -> LatentFeature:
    """Project an image pair into the latent deformation space."""
    grid = same_grid(source, target)
    lat = latent_grid(grid)
    pair = torch.stack([source.values, target.values]).unsqueeze(0)
    z = net.encode_batch(pair)[0]
    return LatentFeature(lat, z)


def decode(z: LatentFeature, net: RegistrationNet) -> VectorField:
    """Decode a latent code to a full-resolution velocity field."""
    if z.channels != net.latent_channels:
        raise ValueError(f"latent has {z.channels} channels, net expects {net.latent_channels}")
    full = GridSpec(tuple(n * 4 for n in z.grid.dims),
                    tuple(h / 4 for h in z.grid.spacing))
    v = net.decode_batch(z.values.unsqueeze(0))[0]
    return VectorField(full, v)


def backward_gradients(loss: torch.Tensor, module: nn.Module,
                       inputs: tuple[torch.Tensor, ...] = ()) -> tuple[dict, tuple]:
    """Exact reverse-mode gradients of a scalar loss w.r.t. parameters and inputs.

    Parameters that do not influence the loss get zero gradients.
    """
    names, params = zip(*module.named_parameters())
    grads = torch.autograd.grad(loss, params + tuple(inputs), allow_unused=True,
                                materialize_grads=True)
    param_grads = dict(zip(names, grads[: len(params)]))
    return param_grads, grads[len(params):]
