"""Evaluation metrics: Dice overlap, Hausdorff distance, DetJac diagnostics,
and per-step trajectory errors against a reference geodesic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .grid import DTYPE, GridSpec, ScalarField, Transform, same_grid
from .fields import det_jacobian, grid_points_t, interp_t
from .epdiff import Trajectory


@dataclass(frozen=True)
class LabelMask:
    """Integer segmentation labels per node; 0 is background."""

    grid: GridSpec
    labels: torch.Tensor

    def __post_init__(self):
        labels = torch.as_tensor(self.labels, dtype=torch.long)
        if tuple(labels.shape) != self.grid.dims:
            raise ValueError(f"labels must have shape {self.grid.dims}, "
                             f"got {tuple(labels.shape)}")
        if (labels < 0).any():
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "labels", labels)


def dice(a: LabelMask, b: LabelMask, label: int = 1) -> float:
    """2|A and B| / (|A| + |B|) for one label; 1.0 when both sets are empty."""
    same_grid(a, b)
    in_a = a.labels == label
    in_b = b.labels == label
    denom = int(in_a.sum()) + int(in_b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((in_a & in_b).sum()) / denom


def _boundary_nodes(mask: LabelMask, label: int) -> np.ndarray:
    """Nodes of the label with at least one differently-labeled face neighbor.

    Distances are an image-space convention: neighbors do not wrap, and
    coordinates are in grid units.
    """
    lab = mask.labels.numpy()
    inside = lab == label
    if not inside.any():
        return np.empty((0, mask.grid.d))
    boundary = np.zeros_like(inside)
    for axis in range(lab.ndim):
        for shift in (1, -1):
            neighbor = np.full_like(inside, False)
            src = [slice(None)] * lab.ndim
            dst = [slice(None)] * lab.ndim
            if shift == 1:
                src[axis], dst[axis] = slice(1, None), slice(None, -1)
            else:
                src[axis], dst[axis] = slice(None, -1), slice(1, None)
            neighbor[tuple(dst)] = inside[tuple(src)]
            edge = [slice(None)] * lab.ndim
            edge[axis] = -1 if shift == 1 else 0
            neighbor[tuple(edge)] = False  # outside the frame counts as different
            boundary |= inside & ~neighbor
    return np.argwhere(boundary).astype(float)


def hausdorff(a: LabelMask, b: LabelMask, label: int = 1) -> float:
    """max of the two directed max-min boundary distances, in grid units."""
    same_grid(a, b)
    xs = _boundary_nodes(a, label)
    ys = _boundary_nodes(b, label)
    if len(xs) == 0 or len(ys) == 0:
        raise ValueError(f"label {label} has an empty boundary set")
    d_xy = cKDTree(ys).query(xs)[0].max()
    d_yx = cKDTree(xs).query(ys)[0].max()
    return float(max(d_xy, d_yx))


def warp_labels(mask: LabelMask, phi: Transform) -> LabelMask:
    """Nearest-neighbor label propagation through x + u(x); ties snap to the
    lower index."""
    grid = same_grid(mask, phi)
    pts = grid_points_t(grid) + phi.u.reshape(grid.d, -1).T
    g = pts / torch.tensor(grid.spacing, dtype=DTYPE)
    idx = [torch.ceil(g[:, a] - 0.5).long() % grid.dims[a] for a in range(grid.d)]
    warped = mask.labels[tuple(idx)].reshape(grid.dims)
    return LabelMask(grid, warped)


@dataclass(frozen=True)
class DetJacReport:
    minimum: float
    maximum: float
    mean: float
    negative_count: int


def detjac_report(phi: Transform) -> DetJacReport:
    """Summary statistics of det(D phi) plus the folded-node count."""
    dj = det_jacobian(phi).values
    return DetJacReport(
        minimum=float(dj.min()),
        maximum=float(dj.max()),
        mean=float(dj.mean()),
        negative_count=int((dj < 0).sum()),
    )


@dataclass(frozen=True)
class TrajectoryMseRow:
    t: int
    image_mse: float
    transform_mse: float
    velocity_mse: float


def trajectory_mse(pred: Trajectory, ref: Trajectory) -> list[TrajectoryMseRow]:
    """Per-step mean squared errors between two trajectories.

    Both trajectories must carry deformed images (see deform_along).
    """
    if pred.steps != ref.steps:
        raise ValueError(f"trajectory lengths differ: {pred.steps} vs {ref.steps}")
    if pred.images is None or ref.images is None:
        raise ValueError("both trajectories need deformed images attached")
    rows = []
    for t in range(pred.steps + 1):
        img = (pred.images[t].values - ref.images[t].values).pow(2).mean()
        tra = (pred.transforms[t].u - ref.transforms[t].u).pow(2).mean()
        vel = (pred.velocities[t].components - ref.velocities[t].components).pow(2).mean()
        rows.append(TrajectoryMseRow(t, float(img), float(tra), float(vel)))
    return rows
