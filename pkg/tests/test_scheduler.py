import numpy as np
import pytest
import torch

from partseg.backbone.scheduler import DDPMSchedule
from partseg.errors import TimestepError


def abar_oracle(t, beta_start=1e-4, beta_end=2e-2, steps=1000):
    betas = np.linspace(beta_start, beta_end, steps)
    return float(np.prod(1.0 - betas[: t + 1]))


def test_t_max_and_range():
    s = DDPMSchedule()
    assert s.t_max == 999
    assert s.check_timestep(0) == 0
    assert s.check_timestep(999) == 999


@pytest.mark.parametrize("t", [-1, 1000, 2.5, True, 10 ** 6])
def test_out_of_range(t):
    with pytest.raises(TimestepError):
        DDPMSchedule().check_timestep(t)


@pytest.mark.parametrize("t", [0, 1, 100, 500, 999])
def test_coefficients_match_closed_form(t):
    signal, sigma = DDPMSchedule().coefficients(t)
    abar = abar_oracle(t)
    assert signal == pytest.approx(np.sqrt(abar), abs=1e-12)
    assert sigma == pytest.approx(np.sqrt(1 - abar), abs=1e-12)


def test_t0_is_nearly_clean():
    s = DDPMSchedule()
    x0 = torch.randn(4, 8, 8, dtype=torch.float64)
    noise = torch.randn(4, 8, 8, dtype=torch.float64)
    xt = s.add_noise(x0, noise, 0)
    signal, sigma = s.coefficients(0)
    assert torch.allclose(xt, signal * x0 + sigma * noise)
    assert float((xt - x0).abs().max()) < 0.1


def test_variance_monte_carlo():
    # per-element variance of x_t for a unit-variance x_0 at t=100, 10^6 draws
    s = DDPMSchedule()
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(10 ** 6, generator=g, dtype=torch.float64)
    noise = torch.randn(10 ** 6, generator=g, dtype=torch.float64)
    empirical = float(s.add_noise(x0, noise, 100).var())
    abar = abar_oracle(100)
    expected = abar * 1.0 + (1 - abar)
    assert s.variance(100) == pytest.approx(expected, rel=1e-12)
    assert abs(empirical - expected) / expected < 0.05


def test_variance_scaled_data():
    s = DDPMSchedule()
    g = torch.Generator().manual_seed(1)
    x0 = 3.0 * torch.randn(10 ** 6, generator=g, dtype=torch.float64)
    noise = torch.randn(10 ** 6, generator=g, dtype=torch.float64)
    empirical = float(s.add_noise(x0, noise, 100).var())
    assert abs(empirical - s.variance(100, 9.0)) / s.variance(100, 9.0) < 0.05


def test_scaled_linear_betas():
    s = DDPMSchedule(1000, 0.00085, 0.012, "scaled_linear")
    ref = np.linspace(0.00085 ** 0.5, 0.012 ** 0.5, 1000) ** 2
    np.testing.assert_allclose(s.betas.numpy(), ref, rtol=1e-12)


def test_unknown_schedule():
    with pytest.raises(ValueError):
        DDPMSchedule(beta_schedule="cosine")


def test_v_to_epsilon_inverts_v_parameterization():
    s = DDPMSchedule()
    g = torch.Generator().manual_seed(2)
    x0 = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    a, b = s.coefficients(300)
    v = a * eps - b * x0
    assert torch.allclose(s.v_to_epsilon(v, s.add_noise(x0, eps, 300), 300), eps, atol=1e-12)
