"""Field algebra on periodic grids: interpolation, warping, differential operators.

Tensor-level helpers (suffix ``_t``) operate on batched tensors and are fully
differentiable; the public operations wrap them for the field containers.
"""
from __future__ import annotations

import itertools

import torch

from .grid import DTYPE, GridSpec, JacobianField, ScalarField, Transform, VectorField, same_grid


def grid_points_t(grid: GridSpec) -> torch.Tensor:
    """Node positions as (num_points, d)."""
    return grid.coordinates()


def interp_t(values: torch.Tensor, points: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """Multilinear interpolation with periodic wrap on every axis.

    values: (N, C, *dims); points: (N, P, d) in physical coordinates.
    Returns (N, C, P). Differentiable in both values and points.
    """
    d = grid.d
    dims = grid.dims
    spacing = torch.tensor(grid.spacing, dtype=DTYPE)
    g = points / spacing  # cell units
    base = torch.floor(g)
    frac = g - base
    base = base.long()

    n, c = values.shape[0], values.shape[1]
    flat = values.reshape(n, c, -1)
    # row-major strides over the spatial dims
    strides = []
    s = 1
    for m in reversed(dims):
        strides.append(s)
        s *= m
    strides = list(reversed(strides))

    out = torch.zeros(n, c, points.shape[1], dtype=values.dtype)
    for corner in itertools.product((0, 1), repeat=d):
        w = torch.ones(points.shape[:2], dtype=DTYPE)
        idx = torch.zeros(points.shape[:2], dtype=torch.long)
        for a in range(d):
            ia = torch.remainder(base[..., a] + corner[a], dims[a])
            idx = idx + ia * strides[a]
            w = w * (frac[..., a] if corner[a] else 1.0 - frac[..., a])
        gathered = torch.gather(flat, 2, idx.unsqueeze(1).expand(n, c, -1))
        out = out + w.unsqueeze(1) * gathered
    return out


def warp_t(values: torch.Tensor, displacement: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """Resample values at x + u(x) for every node x.

    values: (N, C, *dims); displacement: (N, d, *dims). Returns (N, C, *dims).
    """
    n = values.shape[0]
    pts = grid_points_t(grid).unsqueeze(0) + displacement.reshape(n, grid.d, -1).transpose(1, 2)
    out = interp_t(values, pts, grid)
    return out.reshape(values.shape)


def jacobian_t(components: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """Central differences with periodic wrap.

    components: (..., C, *dims) -> (..., C, d, *dims), entry (i, j) = d c_i / d x_j.
    """
    d = grid.d
    cols = []
    for a in range(d):
        ax = components.dim() - d + a
        deriv = (torch.roll(components, -1, ax) - torch.roll(components, 1, ax)) / (
            2.0 * grid.spacing[a]
        )
        cols.append(deriv)
    return torch.stack(cols, dim=components.dim() - d)


def divergence_t(components: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """(..., d, *dims) -> (..., *dims), trace of the central-difference Jacobian."""
    d = grid.d
    out = None
    for a in range(d):
        ax = components.dim() - d + a
        comp = components.select(components.dim() - d - 1, a)
        deriv = (torch.roll(comp, -1, ax - 1) - torch.roll(comp, 1, ax - 1)) / (
            2.0 * grid.spacing[a]
        )
        out = deriv if out is None else out + deriv
    return out


def interpolate(f: ScalarField, points) -> torch.Tensor:
    """Interpolate a scalar field at arbitrary positions (wrapped periodically)."""
    pts = torch.as_tensor(points, dtype=DTYPE)
    if pts.dim() == 1:
        pts = pts.unsqueeze(0)
    if pts.shape[-1] != f.grid.d:
        raise ValueError(f"points must be {f.grid.d}-dimensional, got shape {tuple(pts.shape)}")
    if not torch.isfinite(pts).all():
        raise ValueError("interpolation points must be finite")
    vals = interp_t(f.values.unsqueeze(0).unsqueeze(0), pts.unsqueeze(0), f.grid)
    return vals[0, 0]


def warp(f: ScalarField, phi: Transform) -> ScalarField:
    """Deform an image: output(x) = f(x + u(x))."""
    grid = same_grid(f, phi)
    out = warp_t(f.values.unsqueeze(0).unsqueeze(0), phi.u.unsqueeze(0), grid)
    return ScalarField(grid, out[0, 0])


def compose(phi: Transform, psi: Transform) -> Transform:
    """(phi o psi)(x) = phi(psi(x)); displacement u_psi(x) + u_phi(x + u_psi(x))."""
    grid = same_grid(phi, psi)
    u = psi.u + warp_t(phi.u.unsqueeze(0), psi.u.unsqueeze(0), grid)[0]
    return Transform(grid, VectorField(grid, u))


def jacobian(v: VectorField) -> JacobianField:
    return JacobianField(v.grid, jacobian_t(v.components, v.grid))


def divergence(v: VectorField) -> ScalarField:
    return ScalarField(v.grid, divergence_t(v.components, v.grid))


def det_jacobian(phi: Transform) -> ScalarField:
    """Pointwise det(Id + Du), Du by central differences; 1 everywhere at identity."""
    grid = phi.grid
    du = jacobian_t(phi.u, grid)  # (d, d, *dims)
    d = grid.d
    eye = torch.eye(d, dtype=DTYPE).reshape(d, d, *([1] * d))
    mat = (eye + du).permute(*range(2, 2 + d), 0, 1)
    return ScalarField(grid, torch.linalg.det(mat))


def dual_pairing(m: VectorField, v: VectorField) -> float:
    """Discrete pairing sum_x m(x) . v(x) * cell volume."""
    grid = same_grid(m, v)
    return float((m.components * v.components).sum() * grid.cell_volume)


def dual_pairing_t(m: torch.Tensor, v: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """Differentiable pairing on (..., d, *dims) tensors, reduced over all but batch dims."""
    d = grid.d
    red = tuple(range(m.dim() - d - 1, m.dim()))
    return (m * v).sum(dim=red) * grid.cell_volume
