"""DDPM forward-process noise schedule."""
import torch

from ..errors import TimestepError


class DDPMSchedule:
    """Closed-form forward process q(x_t | x_0).

    Only the noising half of DDPM is needed here: nothing in this package
    samples images, it only perturbs encoded latents before probing the
    denoiser.
    """

    def __init__(self, num_train_timesteps=1000, beta_start=1e-4, beta_end=2e-2,
                 beta_schedule="linear"):
        self.num_train_timesteps = int(num_train_timesteps)
        self.beta_schedule = beta_schedule
        if beta_schedule == "linear":
            betas = torch.linspace(beta_start, beta_end, self.num_train_timesteps, dtype=torch.float64)
        elif beta_schedule == "scaled_linear":
            # the variant Stable Diffusion ships with
            betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, self.num_train_timesteps,
                                   dtype=torch.float64) ** 2
        else:
            raise ValueError(f"unknown beta schedule {beta_schedule!r}")
        self.betas = betas
        self.alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)

    @property
    def t_max(self):
        return self.num_train_timesteps - 1

    def check_timestep(self, t):
        if isinstance(t, bool) or int(t) != t or not 0 <= int(t) <= self.t_max:
            raise TimestepError(f"timestep {t!r} outside [0, {self.t_max}]")
        return int(t)

    def coefficients(self, t):
        """(sqrt(abar_t), sqrt(1 - abar_t)) as python floats."""
        t = self.check_timestep(t)
        abar = self.alphas_cumprod[t]
        return float(abar.sqrt()), float((1.0 - abar).sqrt())

    def add_noise(self, x0, noise, t):
        signal, sigma = self.coefficients(t)
        return signal * x0 + sigma * noise

    def variance(self, t, data_variance=1.0):
        """Per-element variance of x_t for x_0 with the given variance, independent of noise."""
        signal, sigma = self.coefficients(t)
        return signal ** 2 * data_variance + sigma ** 2

    def v_to_epsilon(self, v, x_t, t):
        signal, sigma = self.coefficients(t)
        return signal * v + sigma * x_t
