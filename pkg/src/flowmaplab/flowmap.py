"""Flow-map parametrization and multi-step samplers.

The flow map is f(x, t, s) = x + (s - t) F(x, t, s, lam): skip weight 1 and
output weight (s - t), so f(x, t, t) = x holds exactly with no arithmetic on F
beyond a multiply by zero. Samplers walk a strictly decreasing schedule from 1
to 0 and interpolate between deterministic stepping (gamma = 0) and full
denoise-renoise consistency sampling (gamma = 1):

    for each transition t -> s (except the last):
        s~ = (1 - gamma) * s
        x  = alpha * f(x, t, s~) + beta * z,   z ~ N(0, sigma_d^2 I)
        alpha = (1 - s) / (1 - s~),  beta = sqrt(s^2 - alpha^2 s~^2)

    the final transition to 0 is always a pure flow-map jump.

alpha matches the data part of the marginal and beta restores the noise part,
so Gaussian marginals are preserved for every gamma; beta^2 >= 0 always since
alpha * s~ <= s. Chains are simulated in fixed-size chunks with RNG streams
keyed by (seed, chunk index): output is bit-identical for a given seed and
chunk size however the chunks are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TimePair",
    "SamplerSchedule",
    "apply",
    "deterministic_sample",
    "gamma_sample",
    "multistep_cm_sample",
    "renoise_coefficients",
]

DEFAULT_CHUNK = 4096


@dataclass(frozen=True)
class TimePair:
    """A (t, s) jump; generation direction requires s <= t."""

    t: float
    s: float

    def __post_init__(self):
        for name, value in (("t", self.t), ("s", self.s)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.s > self.t:
            raise ValueError(f"generation direction requires s <= t, got t={self.t}, s={self.s}")


class SamplerSchedule:
    """Strictly decreasing timesteps from 1 to 0, a stochasticity gamma, a seed."""

    def __init__(self, timesteps, gamma: float = 0.0, seed: int = 0):
        ts = np.asarray(timesteps, dtype=float)
        if ts.ndim != 1 or len(ts) < 2:
            raise ValueError("schedule needs at least two timesteps")
        if ts[0] != 1.0 or ts[-1] != 0.0:
            raise ValueError("schedule must start at exactly 1 and end at exactly 0")
        if not np.all(np.diff(ts) < 0):
            raise ValueError("timesteps must be strictly decreasing")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
        self.timesteps = ts
        self.gamma = float(gamma)
        self.seed = int(seed)

    @classmethod
    def uniform(cls, n_steps: int, gamma: float = 0.0, seed: int = 0) -> "SamplerSchedule":
        if n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {n_steps}")
        ts = [(n_steps - i) / n_steps for i in range(n_steps + 1)]
        return cls(ts, gamma=gamma, seed=seed)

    @property
    def n_steps(self) -> int:
        return len(self.timesteps) - 1

    def pairs(self):
        ts = self.timesteps
        return [(float(ts[i]), float(ts[i + 1])) for i in range(self.n_steps)]


def apply(model, x, pair, lam=None, labels=None) -> np.ndarray:
    """One flow-map jump x + (s - t) F(x, t, s, lam)."""
    if not isinstance(pair, TimePair):
        pair = TimePair(*pair)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    F = model.forward(x, pair.t, pair.s, lam, labels)
    return x + (pair.s - pair.t) * F


def renoise_coefficients(s: float, s_tilde: float):
    """(alpha, beta) mixing the jumped state with fresh noise at level s."""
    alpha = (1.0 - s) / (1.0 - s_tilde)
    beta = np.sqrt(max(s * s - alpha * alpha * s_tilde * s_tilde, 0.0))
    return alpha, beta


def _run_chains(model, schedule, gamma, n, lam, labels, sigma_d, x1, chunk_size, dim):
    if x1 is None and n < 1:
        raise ValueError(f"need at least one chain, got n={n}")
    if x1 is not None:
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        n = x1.shape[0]
    pairs = schedule.pairs()
    out = np.empty((n, dim))
    lam_arr = None if lam is None else np.broadcast_to(np.asarray(lam, dtype=float), (n,))
    lab_arr = None if labels is None else np.broadcast_to(np.asarray(labels, dtype=int), (n,))
    start = 0
    for chunk_idx in range(0, -(-n // chunk_size)):
        m = min(chunk_size, n - start)
        rng = np.random.default_rng([schedule.seed, chunk_idx])
        if x1 is None:
            x = sigma_d * rng.standard_normal((m, dim))
        else:
            x = x1[start:start + m].copy()
        cl = None if lam_arr is None else lam_arr[start:start + m]
        cb = None if lab_arr is None else lab_arr[start:start + m]
        for i, (t, s) in enumerate(pairs):
            if i == len(pairs) - 1:
                x = apply(model, x, (t, 0.0), cl, cb)
            else:
                s_tilde = (1.0 - gamma) * s
                jumped = apply(model, x, (t, s_tilde), cl, cb)
                alpha, beta = renoise_coefficients(s, s_tilde)
                z = rng.standard_normal((m, dim))
                x = alpha * jumped + beta * sigma_d * z
        out[start:start + m] = x
        start += m
    return out


def deterministic_sample(model, schedule: SamplerSchedule, n: int = 1, lam=None,
                         labels=None, sigma_d: float = 1.0, x1=None,
                         chunk_size: int = DEFAULT_CHUNK, dim: int | None = None) -> np.ndarray:
    """Fold flow-map jumps over the schedule; random only in the initial draw.

    The initial x1 is drawn exactly as the stochastic samplers draw it (same
    per-chunk streams), so the gamma=0 sampler reproduces this path bit for bit.
    """
    dim = model.dim if dim is None else dim
    pairs = schedule.pairs()
    if x1 is not None:
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        n = x1.shape[0]
    out = np.empty((n, dim))
    lam_arr = None if lam is None else np.broadcast_to(np.asarray(lam, dtype=float), (n,))
    lab_arr = None if labels is None else np.broadcast_to(np.asarray(labels, dtype=int), (n,))
    start = 0
    for chunk_idx in range(0, -(-n // chunk_size)):
        m = min(chunk_size, n - start)
        if x1 is None:
            rng = np.random.default_rng([schedule.seed, chunk_idx])
            x = sigma_d * rng.standard_normal((m, dim))
        else:
            x = x1[start:start + m].copy()
        cl = None if lam_arr is None else lam_arr[start:start + m]
        cb = None if lab_arr is None else lab_arr[start:start + m]
        for t, s in pairs:
            x = apply(model, x, (t, s), cl, cb)
        out[start:start + m] = x
        start += m
    return out


def gamma_sample(model, schedule: SamplerSchedule, n: int = 1, lam=None, labels=None,
                 sigma_d: float = 1.0, x1=None, chunk_size: int = DEFAULT_CHUNK,
                 dim: int | None = None) -> np.ndarray:
    """Stochastic multistep sampling at the schedule's gamma."""
    dim = model.dim if dim is None else dim
    return _run_chains(model, schedule, schedule.gamma, n, lam, labels, sigma_d,
                       x1, chunk_size, dim)


def multistep_cm_sample(model, schedule: SamplerSchedule, n: int = 1, lam=None,
                        labels=None, sigma_d: float = 1.0, x1=None,
                        chunk_size: int = DEFAULT_CHUNK, dim: int | None = None) -> np.ndarray:
    """Denoise-renoise consistency sampling: predict at s=0, renoise to s.

    The model is queried only at s=0. Coincides with gamma_sample at gamma=1
    by construction (shared kernel), so draws are bit-identical under a shared
    seed.
    """
    dim = model.dim if dim is None else dim
    return _run_chains(model, schedule, 1.0, n, lam, labels, sigma_d, x1, chunk_size, dim)
