import numpy as np
import pytest
import torch

from geoflow import GridSpec, ScalarField
from geoflow.regnet import (
    LatentFeature,
    RegistrationNet,
    backward_gradients,
    decode,
    encode,
    latent_grid,
)


def unit_grid(n):
    return GridSpec.unit((n, n))


def random_pair(grid, seed):
    rng = np.random.default_rng(seed)
    s = ScalarField(grid, torch.tensor(rng.uniform(0, 1, grid.dims)))
    t = ScalarField(grid, torch.tensor(rng.uniform(0, 1, grid.dims)))
    return s, t


class TestEncode:
    def test_latent_spatial_dims_quartered(self):
        g = unit_grid(32)
        net = RegistrationNet(seed=0)
        z = encode(*random_pair(g, 0), net)
        assert z.grid.dims == (8, 8)
        assert z.values.shape == (8, 8, 8)
        assert z.grid.extent == g.extent

    def test_zero_images_zero_biases_give_zero_latent(self):
        g = unit_grid(32)
        net = RegistrationNet(seed=0)
        with torch.no_grad():
            for mod in (net.enc1, net.enc2):
                mod.bias.zero_()
        z = encode(ScalarField.zeros(g), ScalarField.zeros(g), net)
        assert z.values.abs().max().item() == 0.0

    def test_deterministic_across_runs(self):
        g = unit_grid(32)
        s, t = random_pair(g, 1)
        n1 = RegistrationNet(seed=42)
        n2 = RegistrationNet(seed=42)
        z1 = encode(s, t, n1)
        z2 = encode(s, t, n2)
        assert torch.equal(z1.values, z2.values)
        assert torch.equal(encode(s, t, n1).values, z1.values)

    def test_rejects_indivisible_dims(self):
        g = GridSpec.unit((20, 36))
        with pytest.raises(ValueError):
            latent_grid(GridSpec.unit((18, 18)))
        assert latent_grid(g).dims == (5, 9)

    def test_grid_mismatch(self):
        net = RegistrationNet(seed=0)
        s = ScalarField.zeros(unit_grid(32))
        t = ScalarField.zeros(unit_grid(64))
        with pytest.raises(ValueError):
            encode(s, t, net)


class TestDecode:
    def test_output_matches_image_dims(self):
        g = unit_grid(32)
        net = RegistrationNet(seed=0)
        z = encode(*random_pair(g, 2), net)
        v = decode(z, net)
        assert v.grid.dims == g.dims
        assert v.components.shape == (2, 32, 32)

    def test_zero_latent_zero_biases_give_zero_velocity(self):
        g = unit_grid(32)
        net = RegistrationNet(seed=0)
        with torch.no_grad():
            net.dec1.bias.zero_()
            net.dec2.bias.zero_()
        z = LatentFeature(latent_grid(g), torch.zeros(8, 8, 8, dtype=torch.float64))
        assert decode(z, net).components.abs().max().item() == 0.0

    def test_channel_mismatch_rejected(self):
        g = unit_grid(32)
        net = RegistrationNet(seed=0)
        z = LatentFeature(latent_grid(g), torch.zeros(5, 8, 8, dtype=torch.float64))
        with pytest.raises(ValueError):
            decode(z, net)

    def test_lipschitz_norm_product_bound(self):
        # |decode(z + dz) - decode(z)| <= bound * |dz| where the bound is the
        # product of per-layer operator-norm bounds: circular conv norm is at
        # most the sum over taps of the tap matrix spectral norm, nearest
        # upsampling doubles the l2 norm in 2D, and GeLU is 1.13-Lipschitz.
        g = unit_grid(32)
        net = RegistrationNet(seed=3)

        def conv_bound(conv):
            w = conv.weight.detach()
            taps = w.reshape(*w.shape[:2], -1)
            return sum(torch.linalg.matrix_norm(taps[:, :, k], ord=2).item()
                       for k in range(taps.shape[2]))

        bound = 2.0 * conv_bound(net.dec1) * 1.13 * 2.0 * conv_bound(net.dec2)
        rng = np.random.default_rng(4)
        z = torch.tensor(rng.standard_normal((1, 8, 8, 8)))
        base = net.decode_batch(z)
        for seed in range(5):
            d = torch.tensor(np.random.default_rng(seed).standard_normal((1, 8, 8, 8)))
            d = 1e-3 * d / d.norm()
            out = net.decode_batch(z + d)
            assert (out - base).norm().item() <= bound * d.norm().item()


class TestBackward:
    def test_decode_norm_gradient_matches_finite_differences(self):
        net = RegistrationNet(seed=5)
        rng = np.random.default_rng(6)
        z = torch.tensor(rng.standard_normal((1, 8, 8, 8)), requires_grad=True)
        loss = net.decode_batch(z).pow(2).sum()
        _, (gz,) = backward_gradients(loss, net, (z,))
        eps = 1e-5
        for seed in (7, 8, 9):
            w = torch.tensor(np.random.default_rng(seed).standard_normal(z.shape))
            with torch.no_grad():
                lp = net.decode_batch(z + eps * w).pow(2).sum().item()
                lm = net.decode_batch(z - eps * w).pow(2).sum().item()
            fd = (lp - lm) / (2 * eps)
            assert float((gz * w).sum()) == pytest.approx(fd, rel=1e-5)

    def test_parameter_gradients_match_finite_differences(self):
        g = unit_grid(32)
        net = RegistrationNet(seed=10)
        s, t = random_pair(g, 11)
        pair = torch.stack([s.values, t.values]).unsqueeze(0)

        def loss_fn():
            return net.decode_batch(net.encode_batch(pair)).pow(2).sum()

        param_grads, _ = backward_gradients(loss_fn(), net)
        eps = 1e-6
        for name, p in net.named_parameters():
            w = torch.tensor(
                np.random.default_rng(hash(name) % 2**32).standard_normal(p.shape))
            with torch.no_grad():
                p.add_(eps * w)
                lp = loss_fn().item()
                p.add_(-2 * eps * w)
                lm = loss_fn().item()
                p.add_(eps * w)
            fd = (lp - lm) / (2 * eps)
            assert float((param_grads[name] * w).sum()) == pytest.approx(fd, rel=1e-5), name

    def test_zero_upstream_gives_zero_gradients(self):
        net = RegistrationNet(seed=12)
        z = torch.zeros((1, 8, 8, 8), dtype=torch.float64, requires_grad=True)
        loss = (net.decode_batch(z) * 0.0).sum()
        param_grads, (gz,) = backward_gradients(loss, net, (z,))
        assert gz.abs().max().item() == 0.0
        for v in param_grads.values():
            assert v.abs().max().item() == 0.0

    def test_batch_gradient_is_sum_of_per_sample(self):
        net = RegistrationNet(seed=13)
        rng = np.random.default_rng(14)
        z = torch.tensor(rng.standard_normal((3, 8, 8, 8)))

        def grads_for(zz):
            loss = net.decode_batch(zz).pow(2).sum()
            pg, _ = backward_gradients(loss, net)
            return pg

        whole = grads_for(z)
        parts = [grads_for(z[i: i + 1]) for i in range(3)]
        for name in whole:
            summed = sum(p[name] for p in parts)
            assert torch.allclose(whole[name], summed, atol=1e-10), name
