import math

import numpy as np
import pytest
import torch

from geoflow import (
    GridSpec,
    ScalarField,
    Transform,
    VectorField,
    compose,
    det_jacobian,
    divergence,
    dual_pairing,
    interpolate,
    jacobian,
    warp,
)
from geoflow.fields import warp_t

from oracles import np_interp

TAU = 2.0 * math.pi


def unit_grid(n):
    return GridSpec.unit((n, n))


def coord_fields(grid):
    axes = [torch.arange(n, dtype=torch.float64) * h for n, h in zip(grid.dims, grid.spacing)]
    return torch.meshgrid(*axes, indexing="ij")


def translation(grid, vec):
    return Transform(grid, VectorField.constant(grid, vec))


class TestGridSpec:
    def test_unit_spacing(self):
        g = GridSpec.unit((32, 16))
        assert g.spacing == (1.0 / 32, 1.0 / 16)
        assert g.extent == (1.0, 1.0)
        assert g.num_points == 512
        assert g.cell_volume == pytest.approx(1.0 / 512)

    def test_rejects_small_dims(self):
        with pytest.raises(ValueError):
            GridSpec.unit((2, 32))

    def test_rejects_bad_dimensionality(self):
        with pytest.raises(ValueError):
            GridSpec((8,), (0.125,))

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValueError):
            GridSpec((8, 8), (0.1, -0.1))

    def test_field_shape_and_finiteness_checks(self):
        g = unit_grid(8)
        with pytest.raises(ValueError):
            ScalarField(g, torch.zeros(8, 4))
        bad = torch.zeros(8, 8)
        bad[0, 0] = float("nan")
        with pytest.raises(ValueError):
            ScalarField(g, bad)


class TestInterpolate:
    def test_constant_field(self):
        g = unit_grid(16)
        f = ScalarField.constant(g, 3.25)
        pts = [[0.013, 0.77], [0.5, 0.5], [0.999, 0.001]]
        assert torch.allclose(interpolate(f, pts), torch.full((3,), 3.25, dtype=torch.float64))

    def test_exact_at_nodes(self):
        g = unit_grid(8)
        rng = np.random.default_rng(0)
        f = ScalarField(g, torch.tensor(rng.standard_normal((8, 8))))
        pts = [[i / 8, j / 8] for i in range(8) for j in range(8)]
        got = interpolate(f, pts).reshape(8, 8)
        assert torch.equal(got, f.values)

    def test_half_cell_query_is_mean_of_straddling_nodes(self):
        # f(x, y) = x on the 32x32 unit torus; query x = 0.5 + half a cell.
        g = unit_grid(32)
        x, _ = coord_fields(g)
        f = ScalarField(g, x)
        got = interpolate(f, [[0.5 + 1.0 / 64.0, 0.25]])
        assert got.item() == pytest.approx(0.515625, abs=1e-14)

    def test_periodic_wrap(self):
        g = unit_grid(8)
        rng = np.random.default_rng(1)
        f = ScalarField(g, torch.tensor(rng.standard_normal((8, 8))))
        a = interpolate(f, [[0.9, 0.3]])
        b = interpolate(f, [[-0.1, 1.3]])
        assert torch.allclose(a, b, atol=1e-14)

    def test_matches_numpy_oracle_on_random_points(self):
        g = unit_grid(16)
        rng = np.random.default_rng(2)
        vals = rng.standard_normal((16, 16))
        pts = rng.uniform(-1.0, 2.0, size=(50, 2))
        f = ScalarField(g, torch.tensor(vals))
        got = interpolate(f, pts).numpy()
        want = np_interp(vals[None], pts, g.dims, g.spacing)[0]
        assert np.allclose(got, want, atol=1e-13)

    def test_nonfinite_position_rejected(self):
        g = unit_grid(8)
        f = ScalarField.zeros(g)
        with pytest.raises(ValueError):
            interpolate(f, [[float("nan"), 0.0]])


class TestWarp:
    def test_identity_is_exact(self):
        g = unit_grid(16)
        rng = np.random.default_rng(3)
        f = ScalarField(g, torch.tensor(rng.standard_normal((16, 16))))
        assert torch.equal(warp(f, Transform.identity(g)).values, f.values)

    def test_constant_image_any_transform(self):
        g = unit_grid(16)
        f = ScalarField.constant(g, 0.7)
        rng = np.random.default_rng(4)
        u = 0.05 * torch.tensor(rng.standard_normal((2, 16, 16)))
        phi = Transform(g, VectorField(g, u))
        assert torch.allclose(warp(f, phi).values, f.values, atol=1e-12)

    def test_quarter_period_shift_gives_cosine(self):
        # Shift by 0.25 lands on grid nodes at n=32, so the result is exact.
        g = unit_grid(32)
        x, _ = coord_fields(g)
        f = ScalarField(g, torch.sin(TAU * x))
        got = warp(f, translation(g, (0.25, 0.0)))
        assert torch.allclose(got.values, torch.cos(TAU * x), atol=1e-12)

    def test_offgrid_shift_error_second_order(self):
        # shift lands mid-cell at every resolution so the interpolation error
        # constant is comparable and the ratio isolates the h^2 factor
        errs = []
        for n in (32, 64, 128):
            g = unit_grid(n)
            shift = 0.5 / n
            x, _ = coord_fields(g)
            f = ScalarField(g, torch.sin(TAU * x))
            got = warp(f, translation(g, (shift, 0.0)))
            want = torch.sin(TAU * (x + shift))
            errs.append((got.values - want).abs().max().item())
        assert 3.0 < errs[0] / errs[1] < 5.0
        assert 3.0 < errs[1] / errs[2] < 5.0

    def test_grid_mismatch_rejected(self):
        f = ScalarField.zeros(unit_grid(16))
        phi = Transform.identity(unit_grid(32))
        with pytest.raises(ValueError):
            warp(f, phi)


class TestCompose:
    def test_identity_neutral(self):
        g = unit_grid(16)
        rng = np.random.default_rng(5)
        u = 0.03 * torch.tensor(rng.standard_normal((2, 16, 16)))
        phi = Transform(g, VectorField(g, u))
        ident = Transform.identity(g)
        assert torch.allclose(compose(ident, phi).u, phi.u, atol=1e-14)
        assert torch.allclose(compose(phi, ident).u, phi.u, atol=1e-14)

    def test_translations_add(self):
        g = unit_grid(16)
        a, b = (0.11, 0.07), (0.31, 0.55)
        got = compose(translation(g, a), translation(g, b))
        want = torch.tensor([a[0] + b[0], a[1] + b[1]], dtype=torch.float64)
        assert torch.allclose(got.u.reshape(2, -1).mean(dim=1), want, atol=1e-13)

    def test_translation_associativity(self):
        g = unit_grid(16)
        ts = [translation(g, v) for v in ((0.1, 0.2), (0.05, 0.33), (0.4, 0.01))]
        left = compose(compose(ts[0], ts[1]), ts[2])
        right = compose(ts[0], compose(ts[1], ts[2]))
        assert (left.u - right.u).abs().max().item() < 1e-6

    def test_fixed_point_inverse_composes_to_identity(self):
        g = unit_grid(32)
        x, y = coord_fields(g)
        u = torch.stack([0.01 * torch.sin(TAU * y), 0.012 * torch.cos(TAU * x)])
        phi = Transform(g, VectorField(g, u))
        # fixed-point iteration for the inverse displacement: w = -u(x + w)
        w = torch.zeros_like(u)
        for _ in range(60):
            w = -warp_t(u.unsqueeze(0), w.unsqueeze(0), g)[0]
        inv = Transform(g, VectorField(g, w))
        assert compose(phi, inv).u.abs().max().item() < 1e-6


class TestJacobian:
    def test_constant_is_zero(self):
        g = unit_grid(16)
        v = VectorField.constant(g, (1.3, -0.4))
        assert torch.equal(jacobian(v).values, torch.zeros(2, 2, 16, 16, dtype=torch.float64))

    def test_sine_derivative_second_order(self):
        errs = []
        for n in (32, 64, 128):
            g = unit_grid(n)
            x, _ = coord_fields(g)
            v = VectorField(g, torch.stack([torch.sin(TAU * x), torch.zeros_like(x)]))
            d = jacobian(v).values
            errs.append((d[0, 0] - TAU * torch.cos(TAU * x)).abs().max().item())
            assert d[0, 1].abs().max().item() < 1e-12
            assert d[1].abs().max().item() < 1e-12
        assert 3.0 < errs[0] / errs[1] < 5.0
        assert 3.0 < errs[1] / errs[2] < 5.0


class TestDivergence:
    def test_constant_is_zero(self):
        g = unit_grid(16)
        v = VectorField.constant(g, (0.5, 0.5))
        assert divergence(v).values.abs().max().item() == 0.0

    def test_analytic_divergence(self):
        g = unit_grid(64)
        x, y = coord_fields(g)
        v = VectorField(g, torch.stack([torch.sin(TAU * x), torch.sin(TAU * y)]))
        want = TAU * (torch.cos(TAU * x) + torch.cos(TAU * y))
        err = (divergence(v).values - want).abs().max().item()
        assert err < TAU**3 / (6 * 64**2) * 2.5

    def test_curl_field_divergence_vanishes_second_order(self):
        # psi mixes different modes per axis so the two cross-derivative
        # stencil factors differ and the cancellation is only O(h^2)
        errs = []
        for n in (32, 64):
            g = unit_grid(n)
            x, y = coord_fields(g)
            psi_y = 2 * TAU * torch.sin(TAU * x) * torch.cos(2 * TAU * y)
            psi_x = TAU * torch.cos(TAU * x) * torch.sin(2 * TAU * y)
            v = VectorField(g, torch.stack([-psi_y, psi_x]))
            errs.append(divergence(v).values.abs().max().item())
        assert errs[0] > 1e-6  # genuinely nonzero residual
        assert 3.0 < errs[0] / errs[1] < 5.0


class TestDetJacobian:
    def test_identity_is_one_exactly(self):
        g = unit_grid(16)
        dj = det_jacobian(Transform.identity(g))
        assert torch.equal(dj.values, torch.ones(16, 16, dtype=torch.float64))

    def test_smooth_bump_mean_volume_preserved(self):
        g = unit_grid(64)
        x, y = coord_fields(g)
        u = 0.02 * torch.stack(
            [torch.sin(TAU * x) * torch.cos(TAU * y), torch.sin(TAU * y)]
        )
        dj = det_jacobian(Transform(g, VectorField(g, u))).values
        assert dj.max().item() > 1.0
        assert dj.min().item() < 1.0
        assert abs(dj.mean().item() - 1.0) < 1e-3

    def test_folded_displacement_goes_negative(self):
        g = unit_grid(32)
        x, _ = coord_fields(g)
        u = torch.stack([0.3 * torch.sin(TAU * x), torch.zeros_like(x)])
        dj = det_jacobian(Transform(g, VectorField(g, u))).values
        assert (dj < 0).any()


class TestDualPairing:
    def test_zero_field(self):
        g = unit_grid(16)
        assert dual_pairing(VectorField.zeros(g), VectorField.constant(g, (1, 2))) == 0.0

    def test_unit_constant_on_unit_torus(self):
        g = unit_grid(32)
        one = VectorField.constant(g, (1.0, 0.0))
        assert dual_pairing(one, one) == pytest.approx(1.0, rel=1e-12)

    def test_bilinear_and_symmetric(self):
        g = unit_grid(16)
        rng = np.random.default_rng(6)
        m = VectorField(g, torch.tensor(rng.standard_normal((2, 16, 16))))
        v = VectorField(g, torch.tensor(rng.standard_normal((2, 16, 16))))
        w = VectorField(g, torch.tensor(rng.standard_normal((2, 16, 16))))
        assert dual_pairing(m, v) == pytest.approx(dual_pairing(v, m), rel=1e-12)
        lhs = dual_pairing(VectorField(g, 2.5 * m.components + w.components), v)
        rhs = 2.5 * dual_pairing(m, v) + dual_pairing(w, v)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            dual_pairing(VectorField.zeros(unit_grid(16)), VectorField.zeros(unit_grid(32)))
