"""Diffeomorphic registration toolkit: geodesic shooting, LDDMM, and a
geodesic neural operator with joint training, on periodic grids."""

__version__ = "0.1.0"

from .grid import GridSpec, JacobianField, ScalarField, Transform, VectorField
from .fields import (
    compose,
    det_jacobian,
    divergence,
    dual_pairing,
    interpolate,
    jacobian,
    warp,
)
from .spectral import (
    FourierMultiplier,
    SpectralKernel,
    apply_K,
    apply_L,
    laplacian_multiplier,
    smooth,
    spectral_conv,
)
from .epdiff import (
    ShootingBlowupError,
    ShootingConfig,
    Trajectory,
    deform_along,
    epdiff_rhs,
    integrate_flow,
    shoot,
)
from .lddmm import RegistrationProblem, RegistrationResult, energy, grad_energy, register_optimize
