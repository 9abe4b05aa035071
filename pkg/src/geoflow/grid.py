"""Grid geometry and field containers for periodic domains.

All fields live on a regular grid over the d-dimensional torus. Node i along
axis a sits at physical position i * spacing[a]; the domain wraps at
dims[a] * spacing[a]. The default spacing 1/dims gives the unit torus.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

DTYPE = torch.float64


def _as_tuple(value, d: int, name: str) -> tuple:
    if isinstance(value, (int, float)):
        return (value,) * d
    out = tuple(value)
    if len(out) != d:
        raise ValueError(f"{name} must have {d} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class GridSpec:
    """Regular periodic grid: per-axis point counts and physical spacing."""

    dims: tuple[int, ...]
    spacing: tuple[float, ...]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        object.__setattr__(self, "dims", dims)
        if self.d not in (2, 3):
            raise ValueError(f"grid must be 2- or 3-dimensional, got d={self.d}")
        if any(n < 4 for n in dims):
            raise ValueError(f"all dims must be >= 4, got {dims}")
        spacing = tuple(float(h) for h in _as_tuple(self.spacing, self.d, "spacing"))
        object.__setattr__(self, "spacing", spacing)
        if any(h <= 0 for h in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")

    @classmethod
    def unit(cls, dims) -> "GridSpec":
        """Unit torus: spacing 1/n per axis."""
        dims = tuple(int(n) for n in (dims if not isinstance(dims, int) else (dims, dims)))
        return cls(dims=dims, spacing=tuple(1.0 / n for n in dims))

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def num_points(self) -> int:
        n = 1
        for m in self.dims:
            n *= m
        return n

    @property
    def cell_volume(self) -> float:
        v = 1.0
        for h in self.spacing:
            v *= h
        return v

    @property
    def extent(self) -> tuple[float, ...]:
        return tuple(n * h for n, h in zip(self.dims, self.spacing))

    def spacing_tensor(self) -> torch.Tensor:
        return torch.tensor(self.spacing, dtype=DTYPE)

    def coordinates(self) -> torch.Tensor:
        """Node positions, shape (num_points, d), row-major node order."""
        axes = [torch.arange(n, dtype=DTYPE) * h for n, h in zip(self.dims, self.spacing)]
        mesh = torch.meshgrid(*axes, indexing="ij")
        return torch.stack([m.reshape(-1) for m in mesh], dim=-1)


def _check_values(grid: GridSpec, values: torch.Tensor, shape: tuple, what: str) -> torch.Tensor:
    values = torch.as_tensor(values, dtype=DTYPE)
    if tuple(values.shape) != shape:
        raise ValueError(f"{what} must have shape {shape}, got {tuple(values.shape)}")
    if not torch.isfinite(values).all():
        raise ValueError(f"{what} contains non-finite values")
    return values


@dataclass(frozen=True)
class ScalarField:
    """Real samples on a grid, one value per node."""

    grid: GridSpec
    values: torch.Tensor

    def __post_init__(self):
        object.__setattr__(
            self, "values", _check_values(self.grid, self.values, self.grid.dims, "scalar field")
        )

    @classmethod
    def zeros(cls, grid: GridSpec) -> "ScalarField":
        return cls(grid, torch.zeros(grid.dims, dtype=DTYPE))

    @classmethod
    def constant(cls, grid: GridSpec, c: float) -> "ScalarField":
        return cls(grid, torch.full(grid.dims, float(c), dtype=DTYPE))


@dataclass(frozen=True)
class VectorField:
    """d real components per node, stored (d, *dims); component i points along axis i."""

    grid: GridSpec
    components: torch.Tensor

    def __post_init__(self):
        shape = (self.grid.d,) + self.grid.dims
        object.__setattr__(
            self, "components", _check_values(self.grid, self.components, shape, "vector field")
        )

    @classmethod
    def zeros(cls, grid: GridSpec) -> "VectorField":
        return cls(grid, torch.zeros((grid.d,) + grid.dims, dtype=DTYPE))

    @classmethod
    def constant(cls, grid: GridSpec, vec) -> "VectorField":
        comp = torch.empty((grid.d,) + grid.dims, dtype=DTYPE)
        for i, c in enumerate(vec):
            comp[i] = float(c)
        return cls(grid, comp)


@dataclass(frozen=True)
class Transform:
    """Deformation phi(x) = x + u(x); identity iff the displacement u is zero."""

    grid: GridSpec
    displacement: VectorField = field(default=None)

    def __post_init__(self):
        if self.displacement is None:
            object.__setattr__(self, "displacement", VectorField.zeros(self.grid))
        if self.displacement.grid != self.grid:
            raise ValueError("displacement grid does not match transform grid")

    @classmethod
    def identity(cls, grid: GridSpec) -> "Transform":
        return cls(grid, VectorField.zeros(grid))

    @property
    def u(self) -> torch.Tensor:
        return self.displacement.components


@dataclass(frozen=True)
class JacobianField:
    """d x d matrix per node, stored (d, d, *dims); entry (i, j) = d v_i / d x_j."""

    grid: GridSpec
    values: torch.Tensor

    def __post_init__(self):
        shape = (self.grid.d, self.grid.d) + self.grid.dims
        object.__setattr__(
            self, "values", _check_values(self.grid, self.values, shape, "jacobian field")
        )


def same_grid(*objs) -> GridSpec:
    """Return the shared grid of the arguments or raise on mismatch."""
    grid = objs[0].grid
    for o in objs[1:]:
        if o.grid != grid:
            raise ValueError(f"grid mismatch: {o.grid} vs {grid}")
    return grid
