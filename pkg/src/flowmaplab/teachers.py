"""Velocity-field teachers for distillation.

A teacher exposes ``velocity(x, t, labels=None)`` returning the conditional
expectation E[x1 - x0 | x_t = x] under the interpolant x_t = (1-t) x0 + t x1
with x1 ~ N(0, sigma_d^2 I). Provided here: the isotropic-Gaussian teacher
(closed form), a Gaussian-mixture teacher with exact log-space posterior
responsibilities, guidance combiners (autoguidance and classifier-free), a
degraded "weak teacher" constructor, and an explicit Euler ODE solver.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .errors import ConfigError, SingularTimeError
from .gaussian_world import GaussianWorld, optimal_velocity

__all__ = [
    "VelocityField",
    "GaussianTeacher",
    "GmmTeacher",
    "GuidanceSpec",
    "gmm_velocity",
    "guided_velocity",
    "make_weak_teacher",
    "make_ring_teacher",
    "euler_solve",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


class VelocityField(Protocol):
    """Anything that can evaluate the PF-ODE drift at (x, t)."""

    def velocity(self, x: np.ndarray, t, labels=None) -> np.ndarray: ...


def _broadcast_time(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        t = np.full(n, float(t))
    if t.shape != (n,):
        raise ValueError(f"time must be scalar or shape ({n},), got {t.shape}")
    return t


class GaussianTeacher:
    """Exact velocity field for N(0, c^2 I) data; noise std fixed to 1."""

    def __init__(self, world: GaussianWorld):
        self.world = world

    @property
    def dim(self) -> int:
        return self.world.dim

    def velocity(self, x, t, labels=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = _broadcast_time(t, x.shape[0])
        c = self.world.c
        denom = t * t + (1.0 - t) ** 2 * (c * c)
        coef = (t - c * c * (1.0 - t)) / denom
        return coef[:, None] * x

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.world.c * rng.standard_normal((n, self.world.dim))


class GmmTeacher:
    """Mixture of isotropic Gaussians with the exact posterior-mean velocity.

    weights: (K,) simplex vector; means: (K, dim); comp_std: (K,) per-component
    isotropic std; labels: optional (K,) integer class per component. Instances
    are immutable after construction and safe to share across threads.
    """

    def __init__(self, weights, means, comp_std, labels=None, sigma_d: float = 1.0):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        comp_std = np.asarray(comp_std, dtype=float)
        if comp_std.ndim == 0:
            comp_std = np.full(len(self.weights), float(comp_std))
        self.comp_std = comp_std
        self.labels = None if labels is None else np.asarray(labels, dtype=int)
        self.sigma_d = float(sigma_d)
        self._validate()
        self.weights = self.weights / self.weights.sum()
        self._log_w = np.log(self.weights)

    def _validate(self):
        k = len(self.weights)
        if self.means.shape[0] != k or self.comp_std.shape != (k,):
            raise ValueError("weights, means and comp_std must agree on the component count")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a simplex vector (sum 1, nonnegative)")
        if np.any(self.comp_std <= 0):
            raise ValueError("all component stds must be > 0")
        if self.sigma_d <= 0:
            raise ValueError("sigma_d must be > 0")
        if self.labels is not None and self.labels.shape != (k,):
            raise ValueError("labels must give one class id per component")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def _component_mask(self, labels):
        """(N, K) boolean mask of admissible components per sample."""
        if labels is None:
            return None
        if self.labels is None:
            raise ValueError("teacher has no component labels; conditional query invalid")
        labels = np.asarray(labels, dtype=int)
        return self.labels[None, :] == labels[:, None]

    def posterior_mean(self, x, t, labels=None) -> np.ndarray:
        """E[x0 | x_t = x], optionally restricted to components of one class.

        Responsibilities are formed in log space and shifted by their maximum,
        so the result stays finite for any finite x.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = _broadcast_time(t, x.shape[0])
        one_mt = (1.0 - t)[:, None]                      # (N, 1)
        var_k = (one_mt * self.comp_std[None, :]) ** 2 + (t[:, None] * self.sigma_d) ** 2
        diff = x[:, None, :] - one_mt[:, :, None] * self.means[None, :, :]   # (N, K, D)
        sq = np.einsum("nkd,nkd->nk", diff, diff)
        log_r = self._log_w[None, :] - 0.5 * (sq / var_k + self.dim * (np.log(var_k) + _LOG_2PI))
        mask = self._component_mask(labels)
        if mask is not None:
            log_r = np.where(mask, log_r, -np.inf)
        log_r = log_r - log_r.max(axis=1, keepdims=True)
        resp = np.exp(log_r)
        resp /= resp.sum(axis=1, keepdims=True)
        gain = one_mt * self.comp_std[None, :] ** 2 / var_k                  # (N, K)
        cond_mean = self.means[None, :, :] + gain[:, :, None] * diff
        return np.einsum("nk,nkd->nd", resp, cond_mean)

    def velocity(self, x, t, labels=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = _broadcast_time(t, x.shape[0])
        if np.any(t <= 0.0):
            raise SingularTimeError("mixture velocity is singular at t=0")
        if np.any(t > 1.0):
            raise ValueError("t must lie in (0, 1]")
        return (x - self.posterior_mean(x, t, labels)) / t[:, None]

    def sample(self, n: int, rng: np.random.Generator, with_labels: bool = False):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        x = self.means[comp] + self.comp_std[comp, None] * rng.standard_normal((n, self.dim))
        if with_labels:
            if self.labels is None:
                raise ValueError("teacher has no component labels")
            return x, self.labels[comp]
        return x


def gmm_velocity(teacher: GmmTeacher, x, t, labels=None) -> np.ndarray:
    """Exact mixture velocity (x - E[x0 | x_t]) / t."""
    return teacher.velocity(x, t, labels)


@dataclass(frozen=True)
class GuidanceSpec:
    """How to combine teacher fields: none, autoguidance, or classifier-free."""

    lam: float = 1.0
    mode: str = "none"
    weak: Optional[VelocityField] = None
    uncond: Optional[VelocityField] = None

    def __post_init__(self):
        if self.mode not in ("none", "autoguidance", "cfg"):
            raise ConfigError(f"unknown guidance mode {self.mode!r}")
        if self.lam < 0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.lam}")
        if self.mode == "none" and self.lam != 1.0:
            raise ConfigError("mode 'none' requires lam == 1")
        if self.mode == "autoguidance" and self.weak is None:
            raise ConfigError("autoguidance requires a weak field")
        if self.mode == "cfg" and self.uncond is None:
            raise ConfigError("cfg requires an unconditional field")


def guided_velocity(spec: GuidanceSpec, main: VelocityField, x, t, labels=None,
                    lam=None) -> np.ndarray:
    """lam * v_main + (1 - lam) * v_guide, affine in the guidance scale.

    `lam` may be a per-sample array overriding spec.lam (used during training
    where the scale is drawn per batch element).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    scale = spec.lam if lam is None else lam
    scale = _broadcast_time(scale, x.shape[0])[:, None]
    if spec.mode == "none":
        return main.velocity(x, t, labels)
    if spec.mode == "autoguidance":
        return scale * main.velocity(x, t, labels) + (1.0 - scale) * spec.weak.velocity(x, t, labels)
    return scale * main.velocity(x, t, labels) + (1.0 - scale) * spec.uncond.velocity(x, t, None)


def make_weak_teacher(teacher: GmmTeacher, multiplier: float, seed: int) -> GmmTeacher:
    """Degraded copy: component stds scaled up, means jittered deterministically.

    The jitter std is 0.1 times the RMS distance of the means from their
    centroid, mimicking an undertrained checkpoint for analytic teachers that
    have no training trajectory.
    """
    if multiplier <= 1.0:
        raise ValueError(f"degradation multiplier must be > 1, got {multiplier}")
    rng = np.random.default_rng(seed)
    centroid = teacher.means.mean(axis=0, keepdims=True)
    spread = float(np.sqrt(np.mean(np.sum((teacher.means - centroid) ** 2, axis=1))))
    jitter = 0.1 * spread * rng.standard_normal(teacher.means.shape)
    return GmmTeacher(
        weights=teacher.weights,
        means=teacher.means + jitter,
        comp_std=teacher.comp_std * multiplier,
        labels=teacher.labels,
        sigma_d=teacher.sigma_d,
    )


def make_ring_teacher(k: int = 8, radius: float = 4.0, comp_std: float = 0.2,
                      labeled: bool = False, sigma_d: float = 1.0) -> GmmTeacher:
    """The default 2D toy: k equal Gaussians on a ring."""
    angles = 2.0 * np.pi * np.arange(k) / k
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.arange(k) if labeled else None
    return GmmTeacher(np.full(k, 1.0 / k), means, comp_std, labels=labels, sigma_d=sigma_d)


def euler_solve(field: VelocityField, x, t_from: float, t_to: float, n_steps: int,
                labels=None) -> np.ndarray:
    """Explicit Euler integration of dx/dt = v(x, t) from t_from to t_to.

    The field is only evaluated at the left endpoint of each step, so a field
    singular at the final time (e.g. a mixture at t=0) is never queried there.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    for name, value in (("t_from", t_from), ("t_to", t_to)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    if t_from == t_to:
        return x
    grid = np.linspace(t_from, t_to, n_steps + 1)
    grid[-1] = t_to
    for i in range(n_steps):
        v = field.velocity(x, grid[i], labels)
        x = x + (grid[i + 1] - grid[i]) * v
    return x
