"""Training objectives: loss values plus parameter gradients.

Every objective follows the same stopgrad discipline: targets are computed
from a frozen parameter copy (``frozen``, defaulting to the live model) and
gradients flow only through the taped forward pass of the live model. Since
gradients never flow through a tangent, the JVPs here are plain forward-mode
evaluations; no differentiation through the JVP happens anywhere.

The distillation objective pipeline is: warmup coefficient r ramping linearly
to r_max over the warmup iterations, the raw tangent
    g = (F_frozen - v) + r (t - s) dF_frozen/dt,
per-sample normalization g / (||g|| + c_norm), and the surrogate loss
    mean || F - stopgrad(F) + g ||^2,
whose gradient equals the continuous-time objective's. The pair weighting
w(t, s) enters as the per-sample factor w(t, s) * (t - s)^2 on the surrogate;
the default w = 1/|t - s|^2 makes that factor one.

Batch elements with non-finite tangents are rejected and counted; an
all-rejected batch raises DivergenceError.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError

__all__ = [
    "EmdConfig",
    "ObjectiveGrad",
    "warmup_coefficient",
    "emd_grad",
    "continuous_cm_grad",
    "lmd_grad",
    "discrete_cm_grad",
    "fm_grad",
    "shortcut_grad",
    "meanflow_grad",
    "regularizer_equivalence_probe",
    "flatten_grads",
    "grad_cosine",
    "grad_norm",
]


@dataclass(frozen=True)
class EmdConfig:
    """Knobs of the tangent pipeline.

    weighting: "inverse_squared" is w(t,s) = 1/|t-s|^2 (surrogate factor 1);
    "uniform" is w = 1 (surrogate factor (t-s)^2).
    """

    c_norm: float = 0.1
    warmup_iters: int = 10000
    r_max: float = 0.99
    weighting: str = "inverse_squared"
    normalize: bool = True

    def __post_init__(self):
        if self.c_norm <= 0:
            raise ValueError(f"c_norm must be > 0, got {self.c_norm}")
        if not 0.0 < self.r_max <= 1.0:
            raise ValueError(f"r_max must lie in (0, 1], got {self.r_max}")
        if self.warmup_iters < 1:
            raise ValueError(f"warmup_iters must be >= 1, got {self.warmup_iters}")
        if self.weighting not in ("inverse_squared", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass
class ObjectiveGrad:
    loss: float
    grads: dict
    diagnostics: dict = field(default_factory=dict)


def warmup_coefficient(iteration: int, cfg: EmdConfig) -> float:
    """r = min(r_max, iteration / warmup_iters), capped strictly below 1 by default."""
    return min(cfg.r_max, iteration / cfg.warmup_iters)


def _rowsq(a):
    return np.einsum("nd,nd->n", a, a)


def _require_generation_pairs(t, s, allow_equal=False):
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    bad = (s > t) if allow_equal else (s >= t)
    if np.any(bad):
        raise ValueError("objective requires generation-direction pairs (s < t); "
                         "reversed pairs are rejected, not sign-flipped")
    return t, s


def _pair_factor(cfg: EmdConfig, t, s):
    if cfg.weighting == "inverse_squared":
        return np.ones_like(t)
    return (t - s) ** 2


def _finite_rows(*arrays):
    mask = np.ones(arrays[0].shape[0], dtype=bool)
    for a in arrays:
        mask &= np.isfinite(a).all(axis=1)
    return mask


def _opt_per_sample(value, n, dtype=float):
    """None stays None; scalars broadcast to (n,) so masking works uniformly."""
    if value is None:
        return None
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        arr = np.full(n, arr[()])
    return arr


def _subset(mask, *items):
    out = []
    for item in items:
        out.append(None if item is None else item[mask])
    return out


def _tangent_surrogate(model, frozen, v, x, t, s, lam, labels, r, cfg):
    """Shared core of the warmup-normalize-regress pipeline."""
    n = x.shape[0]
    lam = _opt_per_sample(lam, n)
    labels = _opt_per_sample(labels, n, dtype=int)
    tape = None
    if frozen is model:
        F_frozen, dF_dt, tape = model.jvp(x, t, s, lam, x_dot=v, t_dot=1.0, s_dot=0.0,
                                          labels=labels, record_tape=True)
    else:
        F_frozen, dF_dt = frozen.jvp(x, t, s, lam, x_dot=v, t_dot=1.0, s_dot=0.0,
                                     labels=labels)
    g_raw = (F_frozen - v) + (r * (t - s))[:, None] * dF_dt
    mask = _finite_rows(g_raw)
    rejected = int((~mask).sum())
    if not mask.any():
        raise DivergenceError("every batch element produced a non-finite tangent")
    if rejected:
        tape = None
        x, t, s, v, lam, labels, g_raw, F_frozen = _subset(mask, x, t, s, v, lam, labels,
                                                           g_raw, F_frozen)
    raw_norms = np.sqrt(_rowsq(g_raw))
    g = g_raw / (raw_norms + cfg.c_norm)[:, None] if cfg.normalize else g_raw
    factor = _pair_factor(cfg, t, s)
    if tape is None:
        F, tape = model.forward_tape(x, t, s, lam, labels)
    else:
        F = F_frozen
    resid = F - F_frozen + g
    n = len(t)
    loss = float(np.mean(factor * _rowsq(resid)))
    upstream = (2.0 * factor / n)[:, None] * resid
    grads, _ = model.backward(tape, upstream)
    diag = {
        "r": float(r),
        "raw_tangent_norm_mean": float(raw_norms.mean()),
        "normalized_tangent_norm_mean": float(np.sqrt(_rowsq(g)).mean()),
        "rejected": rejected,
    }
    return ObjectiveGrad(loss=loss, grads=grads, diagnostics=diag)


def emd_grad(model, v, x, t, s, lam=None, labels=None, *, iteration: int = 0,
             cfg: EmdConfig | None = None, frozen=None) -> ObjectiveGrad:
    """Distillation loss holding the flow-map output fixed along the teacher ODE.

    ``v`` is the (possibly guided) teacher velocity at (x, t), precomputed.
    The tangent direction dF/dt is evaluated with seed (x_dot=v, t_dot=1,
    s_dot=0), the total time derivative along the PF-ODE.
    """
    cfg = cfg or EmdConfig()
    frozen = frozen if frozen is not None else model
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    t, s = _require_generation_pairs(t, s)
    r = warmup_coefficient(iteration, cfg)
    return _tangent_surrogate(model, frozen, v, x, t, s, lam, labels, r, cfg)


def continuous_cm_grad(model, v, x, t, lam=None, labels=None, *, iteration: int = 0,
                       cfg: EmdConfig | None = None, frozen=None) -> ObjectiveGrad:
    """Continuous-time consistency objective, coded as its own s=0 path.

    g = (F_frozen - v) + r * t * dF_frozen/dt with the jump target fixed at 0;
    kept separate so the s=0 reduction of the general objective can be checked
    against an independent implementation.
    """
    cfg = cfg or EmdConfig()
    frozen = frozen if frozen is not None else model
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0):
        raise ValueError("consistency objective needs t > 0")
    s = np.zeros_like(t)
    r = warmup_coefficient(iteration, cfg)
    n = x.shape[0]
    lam = _opt_per_sample(lam, n)
    labels = _opt_per_sample(labels, n, dtype=int)
    tape = None
    if frozen is model:
        F_frozen, dF_dt, tape = model.jvp(x, t, s, lam, x_dot=v, t_dot=1.0, s_dot=0.0,
                                          labels=labels, record_tape=True)
    else:
        F_frozen, dF_dt = frozen.jvp(x, t, s, lam, x_dot=v, t_dot=1.0, s_dot=0.0,
                                     labels=labels)
    g_raw = (F_frozen - v) + (r * t)[:, None] * dF_dt
    mask = _finite_rows(g_raw)
    rejected = int((~mask).sum())
    if not mask.any():
        raise DivergenceError("every batch element produced a non-finite tangent")
    if rejected:
        tape = None
        x, t, s, lam, labels, g_raw, F_frozen = _subset(mask, x, t, s, lam, labels,
                                                        g_raw, F_frozen)
    raw_norms = np.sqrt(_rowsq(g_raw))
    g = g_raw / (raw_norms + cfg.c_norm)[:, None] if cfg.normalize else g_raw
    factor = _pair_factor(cfg, t, s)
    if tape is None:
        F, tape = model.forward_tape(x, t, s, lam, labels)
    else:
        F = F_frozen
    resid = F - F_frozen + g
    n = len(t)
    loss = float(np.mean(factor * _rowsq(resid)))
    grads, _ = model.backward(tape, (2.0 * factor / n)[:, None] * resid)
    diag = {"r": float(r), "raw_tangent_norm_mean": float(raw_norms.mean()),
            "normalized_tangent_norm_mean": float(np.sqrt(_rowsq(g)).mean()),
            "rejected": rejected}
    return ObjectiveGrad(loss=loss, grads=grads, diagnostics=diag)


def lmd_grad(model, v_fn, x, t, s, lam=None, labels=None, *,
             cfg: EmdConfig | None = None, frozen=None, s_min: float = 1e-3) -> ObjectiveGrad:
    """Distillation loss aligning d f/ds with the teacher field at the map's output.

    ``v_fn(x, t, labels)`` must evaluate the teacher at arbitrary points; it is
    queried at (f_frozen, max(s, s_min)), the clamp keeping mixture teachers
    finite near s=0. The defect d = sign(s - t) (df_frozen/ds - v) is regressed
    away through the live flow map with weight w(t, s) |t - s|.
    """
    cfg = cfg or EmdConfig()
    frozen = frozen if frozen is not None else model
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t, s = _require_generation_pairs(t, s)
    n = x.shape[0]
    lam = _opt_per_sample(lam, n)
    labels = _opt_per_sample(labels, n, dtype=int)
    F_frozen, dF_ds = frozen.jvp(x, t, s, lam, x_dot=None, t_dot=0.0, s_dot=1.0, labels=labels)
    span = (s - t)[:, None]
    f_frozen = x + span * F_frozen
    df_ds = F_frozen + span * dF_ds
    v_at = v_fn(f_frozen, np.maximum(s, s_min), labels)
    defect = np.sign(s - t)[:, None] * (df_ds - v_at)
    mask = _finite_rows(defect)
    rejected = int((~mask).sum())
    if not mask.any():
        raise DivergenceError("every batch element produced a non-finite defect")
    if rejected:
        x, t, s, lam, labels, defect, f_frozen = _subset(mask, x, t, s, lam, labels,
                                                         defect, f_frozen)
    if cfg.weighting == "inverse_squared":
        w_tilde = 1.0 / np.abs(t - s)
    else:
        w_tilde = np.abs(t - s)
    target = f_frozen - w_tilde[:, None] * defect
    F, tape = model.forward_tape(x, t, s, lam, labels)
    f = x + (s - t)[:, None] * F
    resid = f - target
    n = len(t)
    loss = float(np.mean(_rowsq(resid)))
    grads, _ = model.backward(tape, (2.0 * (s - t) / n)[:, None] * resid)
    diag = {"r": 0.0, "raw_tangent_norm_mean": float(np.sqrt(_rowsq(defect)).mean()),
            "normalized_tangent_norm_mean": float("nan"), "rejected": rejected}
    return ObjectiveGrad(loss=loss, grads=grads, diagnostics=diag)


def discrete_cm_grad(model, v_fn, x, t, dt: float, distance: str = "l2",
                     huber_c: float = 0.03, lam=None, labels=None,
                     frozen=None) -> ObjectiveGrad:
    """Discrete consistency loss between adjacent timesteps.

    x at t-dt comes from one Euler step on the teacher ODE; t - dt clamps to 0.
    distance is "l2" (squared norm) or "pseudo_huber"
    (sqrt(||.||^2 + c^2) - c).
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if distance not in ("l2", "pseudo_huber"):
        raise ValueError(f"unknown distance {distance!r}")
    frozen = frozen if frozen is not None else model
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.asarray(t, dtype=float)
    t_prev = np.maximum(t - dt, 0.0)
    x_prev = x + (t_prev - t)[:, None] * v_fn(x, t, labels)
    F_prev = frozen.forward(x_prev, t_prev, np.zeros_like(t_prev), lam, labels)
    f_prev = x_prev - t_prev[:, None] * F_prev
    F_cur, tape = model.forward_tape(x, t, np.zeros_like(t), lam, labels)
    f_cur = x - t[:, None] * F_cur
    diff = f_cur - f_prev
    n = len(t)
    if distance == "l2":
        loss = float(np.mean(_rowsq(diff)))
        dl_df = 2.0 * diff / n
    else:
        sq = _rowsq(diff)
        root = np.sqrt(sq + huber_c ** 2)
        # sqrt(u + c^2) - c written cancellation-free for large c
        loss = float(np.mean(sq / (root + huber_c)))
        dl_df = diff / (root[:, None] * n)
    grads, _ = model.backward(tape, (-t)[:, None] * dl_df)
    return ObjectiveGrad(loss=loss, grads=grads,
                         diagnostics={"r": 0.0, "rejected": 0,
                                      "raw_tangent_norm_mean": float(np.sqrt(_rowsq(diff)).mean()),
                                      "normalized_tangent_norm_mean": float("nan")})


def fm_grad(model, x0, x1, t, lam=None, labels=None, weights=None) -> ObjectiveGrad:
    """Flow-matching regression of F(x_t, t, t) onto x1 - x0.

    Used to pretrain toy velocity models and as the s -> t reduction oracle
    for the distillation objective.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    t = np.asarray(t, dtype=float)
    x_t = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    target = x1 - x0
    w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=float)
    F, tape = model.forward_tape(x_t, t, t, lam, labels)
    resid = F - target
    n = len(t)
    loss = float(np.mean(w * _rowsq(resid)))
    grads, _ = model.backward(tape, (2.0 * w / n)[:, None] * resid)
    return ObjectiveGrad(loss=loss, grads=grads,
                         diagnostics={"r": 0.0, "rejected": 0,
                                      "raw_tangent_norm_mean": float(np.sqrt(_rowsq(resid)).mean()),
                                      "normalized_tangent_norm_mean": float("nan")})


def shortcut_grad(model, v_fn, x, t, s, lam=None, labels=None, frozen=None) -> ObjectiveGrad:
    """Velocity regression at s=t plus two-half-step self-consistency.

    The teacher velocity replaces the empirical pair difference in the first
    term; the target of the second term is the frozen model applied twice
    through the midpoint (t+s)/2.
    """
    frozen = frozen if frozen is not None else model
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t, s = _require_generation_pairs(t, s, allow_equal=True)
    mid = 0.5 * (t + s)
    F_a = frozen.forward(x, t, mid, lam, labels)
    hop = x + (mid - t)[:, None] * F_a
    F_b = frozen.forward(hop, mid, s, lam, labels)
    target = hop + (s - mid)[:, None] * F_b
    v = v_fn(x, t, labels)
    F1, tape1 = model.forward_tape(x, t, t, lam, labels)
    r1 = F1 - v
    F2, tape2 = model.forward_tape(x, t, s, lam, labels)
    f = x + (s - t)[:, None] * F2
    r2 = f - target
    n = len(t)
    loss = float(np.mean(_rowsq(r1) + _rowsq(r2)))
    g1, _ = model.backward(tape1, 2.0 * r1 / n)
    g2, _ = model.backward(tape2, (2.0 * (s - t) / n)[:, None] * r2)
    grads = {k: g1[k] + g2[k] for k in g1}
    return ObjectiveGrad(loss=loss, grads=grads,
                         diagnostics={"r": 0.0, "rejected": 0,
                                      "raw_tangent_norm_mean": float(np.sqrt(_rowsq(r2)).mean()),
                                      "normalized_tangent_norm_mean": float("nan")})


def meanflow_grad(model, v, x, t, s, lam=None, labels=None, frozen=None) -> ObjectiveGrad:
    """Average-velocity regression: F onto v - (t - s) dF_frozen/dt."""
    frozen = frozen if frozen is not None else model
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    t, s = _require_generation_pairs(t, s, allow_equal=True)
    n = x.shape[0]
    lam = _opt_per_sample(lam, n)
    labels = _opt_per_sample(labels, n, dtype=int)
    F_frozen, dF_dt = frozen.jvp(x, t, s, lam, x_dot=v, t_dot=1.0, s_dot=0.0, labels=labels)
    target = v - (t - s)[:, None] * dF_dt
    mask = _finite_rows(target)
    rejected = int((~mask).sum())
    if not mask.any():
        raise DivergenceError("every batch element produced a non-finite target")
    if rejected:
        x, t, s, lam, labels, target = _subset(mask, x, t, s, lam, labels, target)
    F, tape = model.forward_tape(x, t, s, lam, labels)
    resid = F - target
    n = len(t)
    loss = float(np.mean(_rowsq(resid)))
    grads, _ = model.backward(tape, 2.0 * resid / n)
    return ObjectiveGrad(loss=loss, grads=grads,
                         diagnostics={"r": 1.0, "rejected": rejected,
                                      "raw_tangent_norm_mean": float(np.sqrt(_rowsq(resid)).mean()),
                                      "normalized_tangent_norm_mean": float("nan")})


def regularizer_equivalence_probe(model, v, x, t, s, lam=None, labels=None, frozen=None):
    """Gradients of (a) the r=0 surrogate and (b) |t-s| ||F - v||^2.

    Both are computed unnormalized with unit pair weight: the identity under
    test is about the raw objectives, and per-sample proportionality (ratio
    |t - s|) is exact in that form. Returns (grads_a, grads_b).
    """
    frozen = frozen if frozen is not None else model
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    t, s = _require_generation_pairs(t, s)
    F_frozen = frozen.forward(x, t, s, lam, labels)
    F, tape = model.forward_tape(x, t, s, lam, labels)
    n = len(t)
    resid_a = F - F_frozen + (F_frozen - v)
    grads_a, _ = model.backward(tape, 2.0 * resid_a / n)
    resid_b = F - v
    grads_b, _ = model.backward(tape, (2.0 * np.abs(t - s) / n)[:, None] * resid_b)
    return grads_a, grads_b


# -- small gradient utilities ------------------------------------------------


def flatten_grads(grads: dict) -> np.ndarray:
    return np.concatenate([np.ravel(grads[k]) for k in sorted(grads)])


def grad_norm(grads: dict) -> float:
    return float(np.linalg.norm(flatten_grads(grads)))


def grad_cosine(a: dict, b: dict) -> float:
    fa, fb = flatten_grads(a), flatten_grads(b)
    denom = np.linalg.norm(fa) * np.linalg.norm(fb)
    if denom == 0:
        return float("nan")
    return float(fa @ fb / denom)
