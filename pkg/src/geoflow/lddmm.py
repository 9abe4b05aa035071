"""Optimization-based registration: minimize the geodesic-shooting energy over v0.

E(v0) = (L v0, v0) + lam * ||S(phi_tau) - T||^2, with phi_tau produced by
shooting v0 through EPDiff and the flow equation. Gradients are exact
discrete-adjoint sensitivities (reverse-mode through every integration step,
interpolation, and FFT).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .grid import DTYPE, ScalarField, Transform, VectorField, same_grid
from .fields import det_jacobian, warp_t
from .epdiff import ShootingBlowupError, ShootingConfig, Trajectory, flow_t, shoot, shoot_velocities_t
from .spectral import apply_multiplier_t


@dataclass(frozen=True)
class RegistrationProblem:
    """A source/target pair with the matching weight and shooting settings."""

    source: ScalarField
    target: ScalarField
    lam: float = 0.03
    shooting: ShootingConfig = field(default_factory=ShootingConfig)

    def __post_init__(self):
        same_grid(self.source, self.target)
        if not (self.lam > 0 and self.lam < float("inf")):
            raise ValueError(f"lam must be finite and positive, got {self.lam}")

    @property
    def grid(self):
        return self.source.grid


def energy_t(v0: torch.Tensor, prob: RegistrationProblem) -> torch.Tensor:
    """Differentiable energy of a raw v0 tensor (d, *dims)."""
    grid = prob.grid
    mult = prob.shooting.multiplier(grid)
    m0 = apply_multiplier_t(v0, mult.coefficients, grid.d)
    reg = (m0 * v0).sum() * grid.cell_volume

    vs = shoot_velocities_t(v0.unsqueeze(0), grid, prob.shooting)
    us = flow_t(vs, grid, prob.shooting.dt)
    warped = warp_t(prob.source.values.unsqueeze(0).unsqueeze(0), us[-1], grid)[0, 0]
    ssd = ((warped - prob.target.values) ** 2).sum() * grid.cell_volume
    return reg + prob.lam * ssd


def energy(v0: VectorField, prob: RegistrationProblem) -> float:
    same_grid(v0, prob.source)
    return float(energy_t(v0.components, prob))


def grad_energy(v0: VectorField, prob: RegistrationProblem) -> VectorField:
    """Exact gradient of the discrete energy with respect to every v0 component."""
    same_grid(v0, prob.source)
    x = v0.components.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(energy_t(x, prob), x)
    return VectorField(v0.grid, g)


@dataclass
class RegistrationResult:
    v0: VectorField
    trajectory: Trajectory
    history: list[float]
    status: str  # "max_iters" or "converged"
    detjac_min: float


def register_optimize(prob: RegistrationProblem, iters: int = 300, lr: float = 2.0,
                      v0: VectorField | None = None) -> RegistrationResult:
    """Sobolev-gradient descent on v0 with a backtracking line search.

    The descent direction is the raw gradient smoothed by K (steepest descent
    in the V metric), the standard choice for shooting-based LDDMM; a plain
    Adam direction stalls far from the optimum on the disk benchmarks. Steps
    that fail to decrease the energy (or blow up the shooting) are retried at
    half the step size; when backtracking exhausts, the run reports
    "converged" and returns the best iterate, so the recorded energy history
    is non-increasing.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    grid = prob.grid
    mult = prob.shooting.multiplier(grid)
    x = (v0.components.detach().clone() if v0 is not None
         else torch.zeros((grid.d,) + grid.dims, dtype=DTYPE))

    step_lr = lr
    e_cur = float(energy_t(x, prob))
    history = [e_cur]
    status = "max_iters"

    for _ in range(iters):
        xg = x.requires_grad_(True)
        (g,) = torch.autograd.grad(energy_t(xg, prob), xg)
        x = x.detach()
        direction = apply_multiplier_t(g, mult.inverse_coefficients, grid.d) / grid.cell_volume

        accepted = False
        for _ in range(30):
            trial = x - step_lr * direction
            try:
                e_trial = float(energy_t(trial, prob))
            except ShootingBlowupError:
                e_trial = float("inf")
            if e_trial <= e_cur:
                accepted = True
                break
            step_lr *= 0.5
        if not accepted:
            status = "converged"
            break
        x, e_cur = trial.detach(), e_trial
        history.append(e_cur)
        step_lr = min(step_lr * 1.25, lr)

    best = VectorField(grid, x.detach())
    traj = shoot(best, prob.shooting)
    dj = det_jacobian(traj.transforms[-1])
    return RegistrationResult(best, traj, history, status, float(dj.values.min()))


def ssd(a: ScalarField, b: ScalarField) -> float:
    """Sum-of-squared intensity differences weighted by cell volume."""
    grid = same_grid(a, b)
    return float(((a.values - b.values) ** 2).sum() * grid.cell_volume)
