import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from rscvae.errors import InvalidInputError
from rscvae.latent import (
    DiagonalGaussian,
    js_between,
    kl_between,
    kl_to_standard,
    reparameterize,
)


def gauss(mean, log_var):
    return DiagonalGaussian(torch.tensor(mean, dtype=torch.float64),
                            torch.tensor(log_var, dtype=torch.float64))


def quad_kl_1d(m1, lv1, m2, lv2):
    """KL(N(m1, e^lv1) || N(m2, e^lv2)) by numerical integration."""
    p = stats.norm(m1, math.exp(0.5 * lv1))
    q = stats.norm(m2, math.exp(0.5 * lv2))
    lo = min(p.ppf(1e-15), q.ppf(1e-15))
    hi = max(p.isf(1e-15), q.isf(1e-15))
    val, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), lo, hi,
                            limit=400, epsabs=1e-13, epsrel=1e-12)
    return val


def quad_js_1d(m1, s1, m2, s2):
    p, q = stats.norm(m1, s1), stats.norm(m2, s2)

    def f(x):
        lp, lq = p.logpdf(x), q.logpdf(x)
        lm = np.logaddexp(lp, lq) - math.log(2)
        return 0.5 * math.exp(lp) * (lp - lm) + 0.5 * math.exp(lq) * (lq - lm)

    val, _ = integrate.quad(f, -40, 40, points=[m1, m2], limit=500)
    return val


class TestKlToStandard:
    def test_identity_is_zero(self):
        assert kl_to_standard(gauss([0.0, 0.0], [0.0, 0.0])).item() == 0.0

    def test_unit_shift(self):
        assert kl_to_standard(gauss([1.0, 1.0], [0.0, 0.0])).item() == pytest.approx(1.0, abs=1e-15)

    def test_monte_carlo(self):
        mean, log_var = np.array([0.3, -0.7]), np.array([0.2, -0.1])
        rng = np.random.default_rng(7)
        std = np.exp(0.5 * log_var)
        z = mean + std * rng.standard_normal((1_000_000, 2))
        log_q = stats.norm(mean, std).logpdf(z).sum(1)
        log_p = stats.norm(0, 1).logpdf(z).sum(1)
        ratio = log_q - log_p
        est, se = ratio.mean(), ratio.std(ddof=1) / math.sqrt(len(ratio))
        got = kl_to_standard(gauss(mean.tolist(), log_var.tolist())).item()
        assert abs(got - est) < 3 * se

    def test_tiny_log_variance_does_not_cancel(self):
        for lv in (1e-102, -1e-30, 1e-12):
            assert kl_to_standard(gauss([0.0], [lv])).item() >= 0.0
            assert kl_between(gauss([0.0], [lv]), gauss([0.0], [0.0])).item() >= 0.0
        assert kl_to_standard(gauss([0.0], [1e-8])).item() == pytest.approx(0.25e-16, rel=1e-6)

    def test_batched_shape(self):
        d = DiagonalGaussian(torch.zeros(5, 3), torch.zeros(5, 3))
        assert kl_to_standard(d).shape == (5,)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            kl_to_standard(gauss([float("nan")], [0.0]))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=6))
    def test_nonnegative(self, params):
        mean, log_var = zip(*params)
        val = kl_to_standard(gauss(list(mean), list(log_var))).item()
        assert val >= 0.0
        if all(m == 0 for m in mean) and all(v == 0 for v in log_var):
            assert val == 0.0
        elif max(max(abs(m) for m in mean), max(abs(v) for v in log_var)) > 1e-3:
            assert val > 1e-9


class TestKlBetween:
    def test_identity(self):
        p = gauss([0.4, -1.2, 3.0], [0.5, -2.0, 1.0])
        assert kl_between(p, p).item() == 0.0

    def test_analytic_shift(self):
        assert kl_between(gauss([0.0], [0.0]), gauss([1.0], [0.0])).item() == pytest.approx(0.5)

    def test_scaled_variance_vs_quadrature(self):
        p, q = gauss([0.0, 0.0], [0.5, 0.5]), gauss([0.0, 0.0], [0.0, 0.0])
        expected = 2 * quad_kl_1d(0, 0.5, 0, 0)
        assert kl_between(p, q).item() == pytest.approx(expected, abs=1e-6)

    def test_randomized_quadrature(self):
        rng = np.random.default_rng(1)
        for _ in range(40):
            d = int(rng.integers(1, 5))
            m1, m2 = rng.uniform(-2, 2, d), rng.uniform(-2, 2, d)
            l1, l2 = rng.uniform(-1.5, 1.5, d), rng.uniform(-1.5, 1.5, d)
            oracle = sum(quad_kl_1d(*args) for args in zip(m1, l1, m2, l2))
            got = kl_between(gauss(m1.tolist(), l1.tolist()), gauss(m2.tolist(), l2.tolist())).item()
            assert got == pytest.approx(oracle, abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            kl_between(gauss([0.0], [0.0]), gauss([0.0, 0.0], [0.0, 0.0]))


class TestJsBetween:
    def test_zero_at_identity(self):
        p = gauss([0.1, 2.0], [0.3, -0.4])
        assert abs(js_between(p, p).item()) <= 1e-12

    @pytest.mark.parametrize("impl", ["moment_matched", "symmetric_kl"])
    def test_symmetry(self, impl):
        rng = np.random.default_rng(3)
        for _ in range(50):
            d = int(rng.integers(1, 6))
            p = gauss(rng.normal(size=d).tolist(), rng.normal(size=d).tolist())
            q = gauss(rng.normal(size=d).tolist(), rng.normal(size=d).tolist())
            assert abs(js_between(p, q, impl).item() - js_between(q, p, impl).item()) <= 1e-12

    def test_moment_matched_close_to_true_js(self):
        truth = quad_js_1d(0, 1, 2, 1)
        approx = js_between(gauss([0.0], [0.0]), gauss([2.0], [0.0])).item()
        assert approx == pytest.approx(math.log(2) / 2, abs=1e-12)  # closed form for this pair
        assert abs(approx - truth) / truth < 0.10

    def test_symmetric_kl_variant(self):
        val = js_between(gauss([0.0], [0.0]), gauss([2.0], [0.0]), impl="symmetric_kl").item()
        assert val == pytest.approx(2.0)

    def test_unknown_impl(self):
        with pytest.raises(InvalidInputError):
            js_between(gauss([0.0], [0.0]), gauss([0.0], [0.0]), impl="exact")

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            js_between(gauss([0.0], [0.0]), gauss([0.0, 1.0], [0.0, 0.0]))


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        d = gauss([0.5, -0.25], [1.0, -3.0])
        assert torch.equal(reparameterize(d, torch.zeros(2, dtype=torch.float64)), d.mean)

    def test_unit_variance(self):
        z = reparameterize(gauss([0.0, 0.0], [0.0, 0.0]), [1.0, -1.0])
        assert z.tolist() == [1.0, -1.0]

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            reparameterize(gauss([0.0, 0.0], [0.0, 0.0]), [1.0])

    def test_moments(self):
        mean, log_var = torch.tensor([1.5, -0.5]), torch.tensor([0.4, -1.0])
        d = DiagonalGaussian(mean.double(), log_var.double())
        gen = torch.Generator().manual_seed(11)
        noise = torch.randn(100_000, 2, generator=gen, dtype=torch.float64)
        z = reparameterize(DiagonalGaussian(d.mean.expand(100_000, 2), d.log_var.expand(100_000, 2)), noise)
        n = z.shape[0]
        var = log_var.double().exp()
        se_mean = (var / n).sqrt()
        se_var = (2 * var ** 2 / (n - 1)).sqrt()
        assert ((z.mean(0) - d.mean).abs() < 3 * se_mean).all()
        assert ((z.var(0) - var).abs() < 3 * se_var).all()

    def test_gradients_match_finite_differences(self):
        mean = torch.tensor([0.3, -1.1, 0.7], dtype=torch.float64, requires_grad=True)
        log_var = torch.tensor([-0.2, 0.5, 1.3], dtype=torch.float64, requires_grad=True)
        noise = torch.tensor([0.9, -0.4, 1.7], dtype=torch.float64)
        weights = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)

        def f(m, lv):
            return (weights * reparameterize(DiagonalGaussian(m, lv), noise)).sum()

        f(mean, log_var).backward()
        eps = 1e-6
        for param, grad, other_first in ((mean, mean.grad, True), (log_var, log_var.grad, False)):
            for i in range(3):
                hi, lo = param.detach().clone(), param.detach().clone()
                hi[i] += eps
                lo[i] -= eps
                if other_first:
                    fd = (f(hi, log_var.detach()) - f(lo, log_var.detach())) / (2 * eps)
                else:
                    fd = (f(mean.detach(), hi) - f(mean.detach(), lo)) / (2 * eps)
                assert abs(grad[i].item() - fd.item()) <= 1e-4 * max(1.0, abs(fd.item()))


class TestDiagonalGaussian:
    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            DiagonalGaussian(torch.zeros(3), torch.zeros(2))

    def test_standard(self):
        d = DiagonalGaussian.standard(4, batch=(2,))
        assert d.mean.shape == (2, 4) and kl_to_standard(d).abs().max() == 0
