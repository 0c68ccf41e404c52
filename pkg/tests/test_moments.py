import math
import numpy as np
import pytest
import torch
from scipy import integrate, stats

from model import moments
from model.errors import MomentError, ShapeError, UnsupportedLayerError
from model.moments import (
    MomentPair,
    affine_moments,
    dropout_moments,
    leaky_relu_moments,
    linear_moments,
    max_pair_moments,
    phi_cdf,
    phi_pdf,
    propagate_activation,
    relu_moments,
    relu_variance_factor,
    sigmoid_moments
)
from module.oracle import mc_moments


def pair(mean, var):
    return MomentPair.scalar(mean, var)


def _sigmoid_reference(mean, var):
    std = math.sqrt(var)
    sig = lambda x: 1.0 / (1.0 + math.exp(-x))
    lo, hi = mean - 12 * std, mean + 12 * std
    points = [0.0] if lo < 0 < hi else None
    m1 = integrate.quad(lambda x: sig(x) * stats.norm.pdf(x, mean, std), lo, hi, points=points, limit=400)[0]
    m2 = integrate.quad(lambda x: sig(x) ** 2 * stats.norm.pdf(x, mean, std), lo, hi, points=points, limit=400)[0]
    return m1, m2 - m1 ** 2


class TestPhi:

    def test_known_values(self):
        assert phi_cdf(0.0).item() == 0.5
        assert abs(phi_pdf(0.0).item() - 0.3989423) < 1e-7
        assert abs(phi_cdf(3.0).item() - 0.9986501) < 1e-7

    def test_against_scipy(self):
        x = torch.linspace(-8, 8, 201, dtype=torch.float64)
        np.testing.assert_allclose(phi_cdf(x).numpy(), stats.norm.cdf(x.numpy()), atol=1e-12)
        np.testing.assert_allclose(phi_pdf(x).numpy(), stats.norm.pdf(x.numpy()), atol=1e-12)

    def test_symmetry(self):
        x = torch.randn(100, dtype=torch.float64)
        np.testing.assert_allclose((phi_cdf(-x) + phi_cdf(x)).numpy(), 1.0, atol=1e-15)


class TestMomentPair:

    def test_shape_mismatch(self):
        with pytest.raises(MomentError):
            MomentPair(torch.zeros(3), torch.ones(2))

    def test_negative_variance(self):
        with pytest.raises(MomentError, match="negative"):
            relu_moments(pair(0, -1))


class TestLinear:

    def test_diagonal_rule(self):
        w = torch.tensor([[1.0, 2.0], [0.0, -1.0]], dtype=torch.float64)
        out = linear_moments(MomentPair(torch.tensor([1.0, 1.0], dtype=torch.float64),
                                        torch.tensor([2.0, 3.0], dtype=torch.float64)), w,
                             torch.tensor([0.5, 0.0], dtype=torch.float64))
        np.testing.assert_allclose(out.mean.numpy(), [3.5, -1.0])
        np.testing.assert_allclose(out.variance.numpy(), [14.0, 3.0])

    def test_two_homogeneous(self):
        gen = torch.Generator().manual_seed(0)
        w = torch.randn(4, 6, generator=gen, dtype=torch.float64)
        x = MomentPair(torch.randn(6, generator=gen, dtype=torch.float64),
                       torch.rand(6, generator=gen, dtype=torch.float64))
        torch.testing.assert_close(linear_moments(x, 3 * w).variance, 9 * linear_moments(x, w).variance)
        torch.testing.assert_close(linear_moments(x, 3 * w).mean, 3 * linear_moments(x, w).mean)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            linear_moments(MomentPair(torch.zeros(3), torch.ones(3)), torch.ones(2, 4))

    def test_affine(self):
        out = affine_moments(pair(1, 4), 2.0, -1.0)
        assert out.mean.item() == 1.0
        assert out.variance.item() == 16.0


class TestRelu:

    def test_standard_normal(self):
        out = relu_moments(pair(0, 1))
        assert abs(out.mean.item() - 0.39894) < 1e-4
        assert abs(out.variance.item() - 0.34085) < 1e-4

    def test_shifted(self):
        out = relu_moments(pair(3, 1))
        assert abs(out.mean.item() - 3.00038) < 1e-3
        assert abs(out.variance.item() - 0.99751) < 1e-3

    def test_point_mass(self):
        assert relu_moments(pair(-2, 0)).mean.item() == 0.0
        out = relu_moments(pair(1.5, 0))
        assert (out.mean.item(), out.variance.item()) == (1.5, 0.0)

    def test_variance_factor_branches_agree(self):
        a = torch.linspace(0, 3, 31, dtype=torch.float64)
        pdf, cdf = stats.norm.pdf(a.numpy()), stats.norm.cdf(a.numpy())
        direct = a.numpy() * pdf + (a.numpy() ** 2 + 1) * cdf - (a.numpy() * cdf + pdf) ** 2
        np.testing.assert_allclose(relu_variance_factor(a).numpy(), direct, atol=1e-10)

    def test_variance_factor_extremes(self):
        a = torch.tensor([-40.0, -8.0, 8.0, 40.0], dtype=torch.float64)
        r = relu_variance_factor(a)
        assert (r >= 0).all() and (r <= 1).all()
        assert abs(r[-1].item() - 1.0) < 1e-12

    def test_monotone_mean(self):
        mu = torch.linspace(-6, 6, 121, dtype=torch.float64)
        out = relu_moments(MomentPair(mu, torch.full_like(mu, 2.0)))
        assert (out.mean.diff() >= 0).all()

    def test_gradients(self):
        mean = torch.tensor([-1.0, 0.0, 2.0], dtype=torch.float64, requires_grad=True)
        var = torch.tensor([0.5, 1.0, 3.0], dtype=torch.float64, requires_grad=True)

        def f(m, v):
            out = relu_moments(MomentPair(m, v))
            return out.mean, out.variance

        assert torch.autograd.gradcheck(f, (mean, var), eps=1e-6, atol=1e-4)

    def test_monte_carlo(self):
        est = mc_moments('relu', pair(0, 1), 200_000, seed=3)
        out = relu_moments(pair(0, 1))
        assert est.within(out.mean.item(), out.variance.item())


class TestLeakyRelu:

    def test_slope_one_is_identity(self):
        out = leaky_relu_moments(pair(0.7, 2.0), 1.0)
        assert abs(out.mean.item() - 0.7) < 1e-12
        assert abs(out.variance.item() - 2.0) < 1e-12

    def test_slope_zero_is_relu(self):
        x = pair(0.3, 1.7)
        torch.testing.assert_close(leaky_relu_moments(x, 0.0).mean, relu_moments(x).mean)
        torch.testing.assert_close(leaky_relu_moments(x, 0.0).variance, relu_moments(x).variance)

    def test_bad_slope(self):
        with pytest.raises(MomentError):
            leaky_relu_moments(pair(0, 1), 1.5)

    def test_monte_carlo(self):
        est = mc_moments('leaky_relu', pair(0, 1), 200_000, seed=4, slope=0.03)
        out = leaky_relu_moments(pair(0, 1), 0.03)
        assert est.within(out.mean.item(), out.variance.item())


class TestSigmoid:

    def test_point_mass(self):
        out = sigmoid_moments(pair(0, 0))
        assert abs(out.mean.item() - 0.5) < 1e-12
        assert out.variance.item() < 1e-20

    def test_symmetric_mean(self):
        assert abs(sigmoid_moments(pair(0, 1)).mean.item() - 0.5) < 1e-12

    @pytest.mark.parametrize("mean,var", [(0.0, 1.0), (-1.5, 0.25), (2.0, 4.0), (0.0, 100.0), (-20.0, 100.0), (7.0, 100.0)])
    def test_quadrature_reference(self, mean, var):
        out = sigmoid_moments(pair(mean, var))
        ref_mean, ref_var = _sigmoid_reference(mean, var)
        assert abs(out.mean.item() - ref_mean) < 1e-6
        assert abs(out.variance.item() - ref_var) < 1e-6

    def test_wide_switch_is_continuous(self):
        below = sigmoid_moments(pair(1.0, moments.WIDE_VARIANCE * (1 - 1e-9)))
        above = sigmoid_moments(pair(1.0, moments.WIDE_VARIANCE * (1 + 1e-9)))
        assert abs(below.mean.item() - above.mean.item()) < 1e-4
        assert abs(below.variance.item() - above.variance.item()) < 1e-4

    def test_saturating(self):
        out = sigmoid_moments(pair(0, 1e6))
        assert abs(out.mean.item() - 0.5) < 1e-2
        assert abs(out.variance.item() - 0.25) < 1e-2

    def test_elementwise_mixed_widths(self):
        x = MomentPair(torch.tensor([0.5, 0.5], dtype=torch.float64), torch.tensor([1.0, 100.0], dtype=torch.float64))
        out = sigmoid_moments(x)
        torch.testing.assert_close(out.mean[0], sigmoid_moments(pair(0.5, 1.0)).mean)
        torch.testing.assert_close(out.mean[1], sigmoid_moments(pair(0.5, 100.0)).mean)


class TestMaxPair:

    def test_iid_standard(self):
        out = max_pair_moments(pair(0, 1), pair(0, 1))
        assert abs(out.mean.item() - 1 / math.sqrt(math.pi)) < 1e-6
        assert abs(out.variance.item() - (1 - 1 / math.pi)) < 1e-6

    def test_dominated(self):
        out = max_pair_moments(pair(0, 1), pair(-1e6, 0))
        assert abs(out.mean.item()) < 1e-6
        assert abs(out.variance.item() - 1.0) < 1e-6

    def test_deterministic(self):
        out = max_pair_moments(pair(2, 0), pair(-1, 0))
        assert (out.mean.item(), out.variance.item()) == (2.0, 0.0)


class TestDropout:

    def test_keep_all(self):
        out = dropout_moments(pair(1.5, 2.0), 1.0)
        assert (out.mean.item(), out.variance.item()) == (1.5, 2.0)

    def test_bernoulli(self):
        out = dropout_moments(pair(1, 0), 0.5)
        assert (out.mean.item(), out.variance.item()) == (0.5, 0.25)

    def test_bad_keep_prob(self):
        with pytest.raises(MomentError):
            dropout_moments(pair(0, 1), 0.0)

    def test_monte_carlo(self):
        est = mc_moments('dropout', pair(2, 3), 200_000, seed=5, keep_prob=0.8)
        out = dropout_moments(pair(2, 3), 0.8)
        assert est.within(out.mean.item(), out.variance.item())


class TestDegeneracy:

    @pytest.mark.parametrize("name", ['relu', 'leaky_relu', 'sigmoid'])
    def test_small_variance_limit(self, name):
        for mu in (-1.0, 0.5, 2.0):
            out = propagate_activation(name, pair(mu, 1e-10), slope=0.03)
            point = {'relu': max(mu, 0.0), 'leaky_relu': mu if mu >= 0 else 0.03 * mu,
                     'sigmoid': 1 / (1 + math.exp(-mu))}[name]
            assert abs(out.mean.item() - point) < 1e-4
            assert 0 <= out.variance.item() < 1e-4

    def test_unknown_activation(self):
        with pytest.raises(UnsupportedLayerError):
            propagate_activation('tanh', pair(0, 1))
