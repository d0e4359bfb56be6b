"""Closed forms for consistency models on isotropic Gaussian data.

Everything in this module is exact: the optimal denoiser/velocity/consistency
model for data N(0, c^2 I) under the linear interpolant x_t = (1-t) x0 + t x1
with x1 ~ N(0, I), a perturbed consistency model whose mean-squared deviation
from the optimum is t^2 eps^2, the variance recursion induced by denoise-renoise
multistep sampling, and the Wasserstein-2 distance between centered isotropic
Gaussians. A chunked Monte-Carlo simulator cross-checks the recursion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SingularTimeError

__all__ = [
    "GaussianWorld",
    "PerturbedCM",
    "UniformStepSchedule",
    "optimal_denoiser",
    "optimal_velocity",
    "optimal_cm",
    "optimal_flow_map",
    "perturbed_cm",
    "variance_recursion_step",
    "multistep_cm_variance",
    "w2_isotropic",
    "simulate_multistep_cm",
]


def _as_finite_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr!r}")
    return arr


def _check_finite_scalar(value: float, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class GaussianWorld:
    """Isotropic Gaussian data distribution N(0, c^2 I) in `dim` dimensions."""

    c: float
    dim: int = 2

    def __post_init__(self):
        _check_finite_scalar(self.c, "c")
        if self.c <= 0:
            raise ValueError(f"data std c must be > 0, got {self.c}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class PerturbedCM:
    """Consistency model (c + t*eps) x / sqrt(t^2 + (1-t)^2 c^2); eps=0 is optimal."""

    world: GaussianWorld
    eps: float = 0.0

    def __post_init__(self):
        _check_finite_scalar(self.eps, "eps")
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")


class UniformStepSchedule:
    """Descending uniform schedule [1, (n-1)/n, ..., 1/n, 0] for n-step sampling."""

    def __init__(self, n: int):
        if n < 1:
            raise ValueError(f"step count must be >= 1, got {n}")
        self.n = int(n)
        self.timesteps = np.array([(self.n - i) / self.n for i in range(self.n + 1)])

    def pairs(self):
        """Consecutive (t, s) transitions in generation order."""
        ts = self.timesteps
        return [(float(ts[i]), float(ts[i + 1])) for i in range(self.n)]


def _marginal_scale(t, c):
    """sqrt(t^2 + (1-t)^2 c^2), the marginal std of x_t when Var(x_1) = 1."""
    return np.sqrt(t * t + (1.0 - t) ** 2 * (c * c))


def optimal_denoiser(x, sigma: float, c: float) -> np.ndarray:
    """Posterior mean E[x0 | x0 + sigma*z = x] for x0 ~ N(0, c^2 I)."""
    x = _as_finite_array(x, "x")
    sigma = _check_finite_scalar(sigma, "sigma")
    c = _check_finite_scalar(c, "c")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if c <= 0:
        raise ValueError(f"c must be > 0, got {c}")
    return (c * c / (c * c + sigma * sigma)) * x


def optimal_velocity(x, t: float, c: float) -> np.ndarray:
    """Exact conditional-expectation velocity E[x1 - x0 | x_t = x]."""
    x = _as_finite_array(x, "x")
    t = _check_finite_scalar(t, "t")
    c = _check_finite_scalar(c, "c")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0 and c == 0.0:
        raise SingularTimeError("velocity is singular at t=0 when the data is a point mass")
    denom = t * t + (1.0 - t) ** 2 * (c * c)
    return ((t - c * c * (1.0 - t)) / denom) * x


def optimal_cm(x, t: float, c: float) -> np.ndarray:
    """Exact consistency model: integrate the optimal velocity from t down to 0."""
    x = _as_finite_array(x, "x")
    t = _check_finite_scalar(t, "t")
    c = _check_finite_scalar(c, "c")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return (c / _marginal_scale(t, c)) * x


def optimal_flow_map(x, t: float, s: float, c: float) -> np.ndarray:
    """Exact t -> s jump along the velocity ODE (the ODE is linear in x)."""
    x = _as_finite_array(x, "x")
    for name, value in (("t", t), ("s", s)):
        value = _check_finite_scalar(value, name)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return (_marginal_scale(s, c) / _marginal_scale(t, c)) * x


def perturbed_cm(x, t: float, model: PerturbedCM) -> np.ndarray:
    """Evaluate the perturbed consistency model; exact identity at t=0 for any eps."""
    x = _as_finite_array(x, "x")
    t = _check_finite_scalar(t, "t")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    c = model.world.c
    return ((c + t * model.eps) / _marginal_scale(t, c)) * x


def variance_recursion_step(var_t: float, t: float, s: float, world: GaussianWorld,
                            eps: float) -> float:
    """One denoise-renoise transition t -> s applied to the marginal variance.

    Var(x_s) = s^2 + (1-s)^2 (c + t*eps)^2 / (t^2 + (1-t)^2 c^2) * Var(x_t).
    The ratio Var(x_t)/denominator is computed first so that the eps=0 fixed
    point is exact in floating point.
    """
    var_t = _check_finite_scalar(var_t, "var_t")
    if var_t < 0:
        raise ValueError(f"var_t must be >= 0, got {var_t}")
    if not s < t:
        raise ValueError(f"need s < t, got s={s}, t={t}")
    if not (0.0 <= s and t <= 1.0):
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    c = world.c
    denom = t * t + (1.0 - t) ** 2 * (c * c)
    return s * s + (1.0 - s) ** 2 * (c + t * eps) ** 2 * (var_t / denom)


def multistep_cm_variance(n: int, world: GaussianWorld, eps: float) -> float:
    """Variance at t=0 after n denoise-renoise steps on the uniform schedule."""
    if n < 1:
        raise ValueError(f"step count must be >= 1, got {n}")
    schedule = UniformStepSchedule(n)
    var = 1.0
    for t, s in schedule.pairs():
        var = variance_recursion_step(var, t, s, world, eps)
    return var


def w2_isotropic(var: float, world: GaussianWorld) -> float:
    """Squared W2 distance per dimension between N(0, var*I) and N(0, c^2 I)."""
    var = _check_finite_scalar(var, "var")
    if var < 0:
        raise ValueError(f"var must be >= 0, got {var}")
    return (math.sqrt(var) - world.c) ** 2


def simulate_multistep_cm(n: int, model: PerturbedCM, num_samples: int, seed: int,
                          chunk_size: int = 1 << 14) -> np.ndarray:
    """Monte-Carlo denoise-renoise sampling with the perturbed CM.

    Draws x1 ~ N(0, I), then for each schedule transition t -> s predicts
    x0' = perturbed_cm(x, t) and renoises x_s = s*z + (1-s)*x0'. Work is split
    into fixed-size chunks with RNG streams keyed by (seed, chunk index), so
    results are bit-identical for a given seed and chunk size regardless of
    how chunks are scheduled.
    """
    if n < 1:
        raise ValueError(f"step count must be >= 1, got {n}")
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    dim = model.world.dim
    pairs = UniformStepSchedule(n).pairs()
    out = np.empty((num_samples, dim))
    start = 0
    for chunk_idx in range(0, -(-num_samples // chunk_size)):
        m = min(chunk_size, num_samples - start)
        rng = np.random.default_rng([seed, chunk_idx])
        x = rng.standard_normal((m, dim))
        for t, s in pairs:
            x0_hat = perturbed_cm(x, t, model)
            if s > 0.0:
                z = rng.standard_normal((m, dim))
                x = s * z + (1.0 - s) * x0_hat
            else:
                x = x0_hat
        out[start:start + m] = x
        start += m
    return out
