"""EDM-style diffusion: corruption, preconditioning, loss, schedule, Heun sampler, CFG.

The variance-exploding convention is used throughout (signal scale 1), so a
noise level is fully described by ``sigma``. Networks are trained in
epsilon-space but wrapped in the EDM preconditioner; the epsilon-space weight
``w(sigma) = lambda(sigma) * sigma**2`` makes the epsilon loss equal to EDM's
denoised-space loss term by term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .numerics import ContractError, SeededRng, as_tensor

__all__ = [
    "EDMParams",
    "NoisePoint",
    "EDMDenoiser",
    "corrupt",
    "precondition_coefficients",
    "edm_precondition",
    "loss_weight",
    "loss",
    "loss_terms",
    "sigma_schedule",
    "heun_sample",
    "cfg_combine",
    "NonFiniteError",
]

# raw_net(scaled_input, c_noise, cond) -> network output of the input's shape
RawNet = Callable[[np.ndarray, float, Any], np.ndarray]
# denoiser(z, sigma, cond) -> D(z, sigma)
DenoiseFn = Callable[[np.ndarray, float, Any], np.ndarray]


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EDMParams:
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise ContractError("sigma_data must be positive")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ContractError("need 0 < sigma_min < sigma_max")
        if not self.rho > 0:
            raise ContractError("rho must be positive")


@dataclass(frozen=True)
class NoisePoint:
    sigma: float
    alpha: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError("sigma must be >= 0")


def corrupt(x0, point: NoisePoint, eps) -> np.ndarray:
    x0, eps = as_tensor(x0), as_tensor(eps)
    if x0.shape != eps.shape:
        raise ContractError(f"x0 {x0.shape} and eps {eps.shape} differ")
    return point.alpha * x0 + point.sigma * eps


def precondition_coefficients(sigma: float, params: EDMParams = EDMParams()):
    """Return ``(c_skip, c_out, c_in, c_noise)``."""
    if not sigma > 0:
        raise ContractError(f"preconditioning needs sigma > 0, got {sigma}")
    sd2 = params.sigma_data**2
    denom = sigma * sigma + sd2
    c_skip = sd2 / denom
    c_out = sigma * params.sigma_data / math.sqrt(denom)
    c_in = 1.0 / math.sqrt(denom)
    c_noise = math.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def edm_precondition(raw_net: RawNet, z, sigma: float, params: EDMParams = EDMParams(), cond=None):
    z = as_tensor(z)
    c_skip, c_out, c_in, c_noise = precondition_coefficients(sigma, params)
    f = as_tensor(raw_net(c_in * z, c_noise, cond))
    if f.shape != z.shape:
        raise ContractError(f"network output {f.shape} does not match input {z.shape}")
    return c_skip * z + c_out * f


class EDMDenoiser:
    """Exposes both the denoised view ``D(z, sigma)`` and the epsilon view."""

    def __init__(self, raw_net: RawNet, params: EDMParams = EDMParams()):
        self.raw_net = raw_net
        self.params = params

    def denoise(self, z, sigma: float, cond=None) -> np.ndarray:
        return edm_precondition(self.raw_net, z, sigma, self.params, cond)

    def eps(self, z, sigma: float, cond=None) -> np.ndarray:
        z = as_tensor(z)
        return (z - self.denoise(z, sigma, cond)) / sigma

    __call__ = eps


def loss_weight(sigma: float, params: EDMParams = EDMParams()) -> float:
    """Epsilon-space weight equal to EDM's ``lambda(sigma) * sigma**2``."""
    return (sigma * sigma + params.sigma_data**2) / params.sigma_data**2


def loss_terms(net, x0, cond, rng: SeededRng, params: EDMParams = EDMParams(), sigma: float | None = None):
    """Draw (sigma, eps), evaluate ``net`` and return ``(sigma, weight, mse)``.

    ``net(z, sigma, cond)`` predicts the noise. When ``sigma`` is given it is used
    instead of a log-normal draw.
    """
    x0 = as_tensor(x0)
    if x0.size == 0:
        raise ContractError("x0 must be non-empty")
    if sigma is None:
        sigma = float(math.exp(params.p_mean + params.p_std * float(rng.normal())))
    eps = rng.normal(x0.shape)
    z = corrupt(x0, NoisePoint(sigma), eps)
    eps_hat = as_tensor(net(z, sigma, cond))
    mse = float(np.mean((eps - eps_hat) ** 2))
    return sigma, loss_weight(sigma, params), mse


def loss(net, x0, cond, rng: SeededRng, params: EDMParams = EDMParams(), sigma: float | None = None) -> float:
    _, w, mse = loss_terms(net, x0, cond, rng, params, sigma)
    return w * mse


def sigma_schedule(n_steps: int, params: EDMParams = EDMParams()) -> np.ndarray:
    if n_steps < 1:
        raise ContractError("n_steps must be >= 1")
    if n_steps == 1:
        return np.array([params.sigma_max, 0.0])
    inv = 1.0 / params.rho
    i = np.arange(n_steps, dtype=np.float64)
    lo, hi = params.sigma_min**inv, params.sigma_max**inv
    sig = (hi + i / (n_steps - 1) * (lo - hi)) ** params.rho
    sig[0], sig[-1] = params.sigma_max, params.sigma_min
    return np.append(sig, 0.0)


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite state at sampler step {step}")


def heun_sample(denoiser: DenoiseFn, noise, n_steps: int, cond=None, params: EDMParams = EDMParams(),
                on_step: Callable[[int], None] | None = None) -> np.ndarray:
    """Deterministic 2nd-order Heun integration of ``dz/dsigma = (z - D(z, sigma)) / sigma``.

    ``noise`` must already be scaled to ``sigma_max``. The last step lands on
    sigma = 0 with a plain Euler update. ``on_step(i)`` is called before step i.
    """
    sigmas = sigma_schedule(n_steps, params)
    x = as_tensor(noise).copy()
    for i in range(n_steps):
        if on_step is not None:
            on_step(i)
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        d = (x - denoiser(x, s, cond)) / s
        x_next = x + (s_next - s) * d
        if s_next > 0.0:
            d_next = (x_next - denoiser(x_next, s_next, cond)) / s_next
            x_next = x + (s_next - s) * (0.5 * d + 0.5 * d_next)
        _check_finite(x_next, i)
        x = x_next
    return x


def cfg_combine(uncond, cond, scale: float) -> np.ndarray:
    uncond, cond = as_tensor(uncond), as_tensor(cond)
    if uncond.shape != cond.shape:
        raise ContractError(f"cfg shapes differ: {uncond.shape} vs {cond.shape}")
    return uncond + scale * (cond - uncond)
