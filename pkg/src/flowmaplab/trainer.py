"""Training loops: flow-map distillation and adversarial finetuning.

Each distillation iteration draws data x0, noise x1 ~ N(0, sigma_d^2 I), an
interval length d = sigmoid(tau) with tau ~ N(P_mean, P_std^2), a start
s ~ Unif(0, 1-d), sets t = s + d, forms x_t = (1-t) x0 + t x1, evaluates the
(optionally guided) teacher velocity, and applies the configured objective's
gradient with a bias-corrected adaptive-moment step.

Adversarial finetuning alternates generator and discriminator steps 1:1. The
generator minimizes Softplus(D(fake) - D(real)) plus alpha * w_adaptive times
the distillation loss at warmup coefficient fixed to 0.99; the discriminator
minimizes the mirrored pairing loss plus beta times squared input-gradient
penalties on both real and fake batches. w_adaptive is the final-layer
gradient-norm ratio of the two generator loss terms, clipped to [1e-4, 1e4].

Runs are single-writer on parameters and fully deterministic for a fixed
(config, seed): identical logs and identical final parameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .net import MlpFlowMap, _sigmoid, _silu, _silu_d, _silu_dd, _uniform_init
from .objectives import (EmdConfig, ObjectiveGrad, continuous_cm_grad, emd_grad, fm_grad,
                         flatten_grads, grad_norm, lmd_grad, meanflow_grad, shortcut_grad)
from .teachers import GuidanceSpec, guided_velocity

__all__ = [
    "TrainConfig",
    "AdvConfig",
    "TrainResult",
    "AdamState",
    "adam_deltas",
    "optimizer_step",
    "sample_time_pair",
    "train",
    "Discriminator",
    "adaptive_weight",
    "adversarial_finetune",
]

OBJECTIVES = ("emd", "lmd", "cm", "shortcut", "meanflow", "fm")


@dataclass
class TrainConfig:
    p_mean: float = -0.6
    p_std: float = 1.6
    lambda_min: float = 1.0
    lambda_max: float = 3.0
    sigma_d: float = 1.0
    lr: float = 1e-3
    lr_schedule: str = "hold-exponential"
    batch: int = 512
    iters: int = 20000
    seed: int = 0
    objective: str = "emd"
    emd: EmdConfig = field(default_factory=EmdConfig)
    ema_decay: float | None = None
    lmd_s_min: float = 1e-3
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_min > self.lambda_max:
            raise ConfigError("lambda_min must be <= lambda_max")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.lr_schedule not in ("constant", "hold-exponential"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")


# hold-exponential schedule: full rate while the tangent warmup develops, then
# exponential decay to this fraction by the final iteration to stop the late
# high-frequency drift that tangent objectives otherwise accumulate
LR_HOLD_FRACTION = 0.3
LR_FINAL_FRACTION = 0.002


def learning_rate_at(cfg: TrainConfig, iteration: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.iters <= 1:
        return cfg.lr
    hold = LR_HOLD_FRACTION * cfg.iters
    if iteration < hold:
        return cfg.lr
    u = (iteration - hold) / (cfg.iters - hold)
    return cfg.lr * LR_FINAL_FRACTION ** u


@dataclass
class AdvConfig:
    alpha: float = 0.1
    beta: float = 0.1
    lr_g: float = 2e-4
    lr_d: float = 5e-4
    disc_hidden: tuple = (128, 128)
    iters: int = 3000

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")


@dataclass
class TrainResult:
    model: MlpFlowMap
    log_rows: list
    ema: dict | None = None
    discriminator: "Discriminator | None" = None


# -- optimizer ----------------------------------------------------------------


class AdamState:
    """First/second moment accumulators keyed like the gradient dict."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0


def adam_deltas(grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected adaptive-moment update, returned as parameter deltas."""
    state.step += 1
    deltas = {}
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.m[name] = m
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** state.step)
        v_hat = v / (1 - beta2 ** state.step)
        deltas[name] = -lr * m_hat / (np.sqrt(v_hat) + eps)
    return deltas


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float, **kw) -> dict:
    """Apply one adaptive-moment step to a plain parameter dict, in place."""
    for name, delta in adam_deltas(grads, state, lr, **kw).items():
        params[name] = params[name] + delta
    return params


# -- schedule -----------------------------------------------------------------


def sample_time_pair(cfg: TrainConfig, rng: np.random.Generator, n: int | None = None):
    """Draw (t, s): interval d = sigmoid(tau), s ~ Unif(0, 1-d), t = s + d.

    Always returns s < t <= 1 with s >= 0.
    """
    size = 1 if n is None else n
    tau = rng.normal(cfg.p_mean, cfg.p_std, size)
    d = _sigmoid(tau)
    s = rng.uniform(0.0, 1.0 - d)
    t = s + d
    if n is None:
        return float(t[0]), float(s[0])
    return t, s


# -- distillation loop ---------------------------------------------------------


def _draw_lambda(cfg: TrainConfig, spec: GuidanceSpec, rng, n: int):
    if spec.mode == "none":
        return np.ones(n)
    return rng.uniform(cfg.lambda_min, cfg.lambda_max, n)


def _objective_step(model, teacher, spec, cfg, iteration, rng, data_sampler,
                    conditional) -> ObjectiveGrad:
    n = cfg.batch
    if data_sampler is not None:
        x0, labels = data_sampler(rng, n)
    elif conditional:
        x0, labels = teacher.sample(n, rng, with_labels=True)
    else:
        x0, labels = teacher.sample(n, rng), None
    x1 = cfg.sigma_d * rng.standard_normal(x0.shape)
    t, s = sample_time_pair(cfg, rng, n)
    lam = _draw_lambda(cfg, spec, rng, n)
    x_t = (1.0 - t)[:, None] * x0 + t[:, None] * x1

    def v_fn(xq, tq, labq):
        k = xq.shape[0]
        return guided_velocity(spec, teacher, xq, tq, labq, lam=lam[:k])

    if cfg.objective == "emd":
        v = guided_velocity(spec, teacher, x_t, t, labels, lam=lam)
        return emd_grad(model, v, x_t, t, s, lam, labels, iteration=iteration, cfg=cfg.emd)
    if cfg.objective == "cm":
        v = guided_velocity(spec, teacher, x_t, t, labels, lam=lam)
        return continuous_cm_grad(model, v, x_t, t, lam, labels, iteration=iteration,
                                  cfg=cfg.emd)
    if cfg.objective == "lmd":
        return lmd_grad(model, v_fn, x_t, t, s, lam, labels, cfg=cfg.emd,
                        s_min=cfg.lmd_s_min)
    if cfg.objective == "shortcut":
        return shortcut_grad(model, v_fn, x_t, t, s, lam, labels)
    if cfg.objective == "meanflow":
        v = guided_velocity(spec, teacher, x_t, t, labels, lam=lam)
        return meanflow_grad(model, v, x_t, t, s, lam, labels)
    return fm_grad(model, x0, x1, t, lam, labels)


def _log_row(iteration, loss, diag, gnorm, w_adaptive=""):
    return {
        "iter": iteration,
        "loss": loss,
        "r": diag.get("r", 0.0),
        "grad_norm": gnorm,
        "raw_tangent_norm_mean": diag.get("raw_tangent_norm_mean", float("nan")),
        "rejected": diag.get("rejected", 0),
        "w_adaptive": w_adaptive,
    }


def train(model: MlpFlowMap, teacher, cfg: TrainConfig, guidance: GuidanceSpec | None = None,
          data_sampler=None, conditional: bool = False, log_rows: list | None = None,
          on_checkpoint=None) -> TrainResult:
    """Distill the teacher into the flow map per the configured objective.

    data_sampler(rng, n) -> (x0, labels_or_None) overrides sampling the teacher
    distribution directly. log_rows, when given, is appended in place so the
    log survives a divergence abort. on_checkpoint(iteration, model) fires
    every cfg.checkpoint_every iterations when set.
    """
    spec = guidance or GuidanceSpec()
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    rows = log_rows if log_rows is not None else []
    ema = None
    if cfg.ema_decay is not None:
        ema = {k: v.copy() for k, v in model.parameters()}
    bad_streak = 0
    for i in range(cfg.iters):
        obj = _objective_step(model, teacher, spec, cfg, i, rng, data_sampler, conditional)
        flat = flatten_grads(obj.grads)
        if not (np.isfinite(obj.loss) and np.isfinite(flat).all()):
            bad_streak += 1
            if bad_streak >= 100:
                raise DivergenceError(f"non-finite loss/gradient for {bad_streak} "
                                      f"consecutive iterations (at iteration {i})")
            continue
        bad_streak = 0
        gnorm = float(np.linalg.norm(flat))
        model.apply_update(adam_deltas(obj.grads, state, learning_rate_at(cfg, i)))
        if ema is not None:
            for k, p in model.parameters():
                ema[k] = cfg.ema_decay * ema[k] + (1 - cfg.ema_decay) * p
        it = i + 1
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iters):
            rows.append(_log_row(it, obj.loss, obj.diagnostics, gnorm))
        if on_checkpoint is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            on_checkpoint(it, model)
    return TrainResult(model=model, log_rows=rows, ema=ema)


# -- discriminator and adversarial finetuning ----------------------------------


class Discriminator:
    """Plain MLP scoring points; higher means more fake under this pairing."""

    def __init__(self, dim: int, hidden=(128, 128), seed: int = 0):
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        rng = np.random.default_rng(seed)
        widths = [self.dim, *self.hidden, 1]
        self.n_layers = len(widths) - 1
        self.params = {}
        for i in range(self.n_layers):
            self.params[f"W{i}"] = _uniform_init(rng, widths[i], widths[i + 1])
            self.params[f"b{i}"] = np.zeros(widths[i + 1])
        self.version = 0

    def parameters(self):
        return list(self.params.items())

    def apply_update(self, deltas: dict):
        for name, delta in deltas.items():
            self.params[name] += delta
        self.version += 1

    def _trace(self, x):
        """Forward pass keeping every intermediate for reverse passes."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        acts, preacts, sigs = [x], [], []
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            preacts.append(z)
            if i < self.n_layers - 1:
                sig = _sigmoid(z)
                sigs.append(sig)
                h = _silu(z, sig)
            else:
                sigs.append(None)
                h = z
            acts.append(h)
        return acts, preacts, sigs

    def forward(self, x) -> np.ndarray:
        acts, _, _ = self._trace(x)
        return acts[-1][:, 0]

    def forward_tape(self, x):
        trace = self._trace(x)
        return trace[0][-1][:, 0], trace

    def backward(self, trace, upstream):
        """Grads of sum_i upstream_i * D(x_i) w.r.t. params, plus x cotangents."""
        acts, preacts, sigs = trace
        delta = np.asarray(upstream, dtype=float)[:, None]
        grads = {}
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                delta = delta * _silu_d(preacts[i], sigs[i])
            grads[f"W{i}"] = acts[i].T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            delta = delta @ self.params[f"W{i}"].T
        return grads, delta

    def input_grad(self, x) -> np.ndarray:
        """Per-sample gradient of the score w.r.t. the input point."""
        _, trace = self.forward_tape(x)
        _, xgrad = self.backward(trace, np.ones(trace[0][0].shape[0]))
        return xgrad

    def penalty_grads(self, x):
        """mean ||grad_x D||^2 over the batch, and its parameter gradient.

        Computed as the parameter gradient of the forward-mode directional
        derivative of D seeded with the (frozen) input gradients: exact
        second-order reverse-over-forward, no finite differences.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        u = self.input_grad(x)
        value = float(np.mean(np.einsum("nd,nd->n", u, u)))

        a, a_dot = x, (2.0 / n) * u
        acts, acts_dot, preacts, preacts_dot, sigs = [a], [a_dot], [], [], []
        for i in range(self.n_layers):
            W = self.params[f"W{i}"]
            z = a @ W + self.params[f"b{i}"]
            z_dot = a_dot @ W
            preacts.append(z)
            preacts_dot.append(z_dot)
            if i < self.n_layers - 1:
                sig = _sigmoid(z)
                sigs.append(sig)
                a = _silu(z, sig)
                a_dot = _silu_d(z, sig) * z_dot
            else:
                sigs.append(None)
                a, a_dot = z, z_dot
            acts.append(a)
            acts_dot.append(a_dot)

        # reverse pass over the dual computation; objective = sum of tangent outputs
        grads = {f"W{i}": np.zeros_like(self.params[f"W{i}"]) for i in range(self.n_layers)}
        grads.update({f"b{i}": np.zeros_like(self.params[f"b{i}"]) for i in range(self.n_layers)})
        da = np.zeros_like(acts[-1])
        da_dot = np.ones_like(acts_dot[-1])
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                z, zd, sig = preacts[i], preacts_dot[i], sigs[i]
                dz = da * _silu_d(z, sig) + da_dot * _silu_dd(z, sig) * zd
                dz_dot = da_dot * _silu_d(z, sig)
            else:
                dz, dz_dot = da, da_dot
            W = self.params[f"W{i}"]
            grads[f"W{i}"] += acts[i].T @ dz + acts_dot[i].T @ dz_dot
            grads[f"b{i}"] += dz.sum(axis=0)
            da = dz @ W.T
            da_dot = dz_dot @ W.T
        return value, grads


def adaptive_weight(grad_adv_norm: float, grad_emd_norm: float) -> float:
    """Final-layer gradient-norm ratio balancing the two generator terms."""
    if grad_adv_norm < 0 or grad_emd_norm < 0:
        raise ValueError("gradient norms must be >= 0")
    return float(np.clip(grad_adv_norm / (grad_emd_norm + 1e-8), 1e-4, 1e4))


def _final_layer_norm(model, grads) -> float:
    names = model.final_layer_names
    return float(np.sqrt(sum(np.sum(grads[n] ** 2) for n in names)))


def _softplus(z):
    return np.logaddexp(0.0, z)


def adversarial_finetune(model: MlpFlowMap, teacher, cfg: TrainConfig, adv: AdvConfig,
                         guidance: GuidanceSpec | None = None, data_sampler=None,
                         conditional: bool = False, log_rows: list | None = None,
                         discriminator: Discriminator | None = None) -> TrainResult:
    """Alternate generator and discriminator steps on one-step samples.

    The generator objective is L_adv + alpha * w_adaptive * L_distill with the
    warmup coefficient pinned at 0.99. Fake points are one-step jumps
    f(x1, 1, 0, lam) = x1 - F(x1, 1, 0, lam).
    """
    spec = guidance or GuidanceSpec()
    emd_cfg = dataclasses.replace(cfg.emd, r_max=0.99)
    rng = np.random.default_rng(cfg.seed)
    disc = discriminator or Discriminator(model.dim, adv.disc_hidden,
                                          seed=int(rng.integers(2**31)))
    g_state, d_state = AdamState(), AdamState()
    rows = log_rows if log_rows is not None else []

    def draw_batch():
        n = cfg.batch
        if data_sampler is not None:
            x0, labels = data_sampler(rng, n)
        elif conditional:
            x0, labels = teacher.sample(n, rng, with_labels=True)
        else:
            x0, labels = teacher.sample(n, rng), None
        x1 = cfg.sigma_d * rng.standard_normal(x0.shape)
        lam = _draw_lambda(cfg, spec, rng, n)
        return x0, x1, lam, labels

    for i in range(adv.iters):
        # generator step
        x0, x1, lam, labels = draw_batch()
        n = cfg.batch
        t, s = sample_time_pair(cfg, rng, n)
        x_t = (1.0 - t)[:, None] * x0 + t[:, None] * x1
        v = guided_velocity(spec, teacher, x_t, t, labels, lam=lam)
        emd_obj = emd_grad(model, v, x_t, t, s, lam, labels,
                           iteration=emd_cfg.warmup_iters, cfg=emd_cfg)

        ones_t = np.ones(n)
        F_gen, gen_tape = model.forward_tape(x1, ones_t, np.zeros(n), lam, labels)
        fake = x1 - F_gen
        d_fake, fake_trace = disc.forward_tape(fake)
        d_real = disc.forward(x0)
        margin = d_fake - d_real
        adv_loss = float(np.mean(_softplus(margin)))
        dmargin = _sigmoid(margin) / n
        _, dfake_x = disc.backward(fake_trace, dmargin)
        adv_grads, _ = model.backward(gen_tape, -dfake_x)

        w_ada = adaptive_weight(_final_layer_norm(model, adv_grads),
                                _final_layer_norm(model, emd_obj.grads))
        scale = adv.alpha * w_ada
        total = {k: adv_grads[k] + scale * emd_obj.grads[k] for k in adv_grads}
        flat = flatten_grads(total)
        if not np.isfinite(flat).all():
            raise DivergenceError(f"generator gradient non-finite at iteration {i}")
        model.apply_update(adam_deltas(total, g_state, adv.lr_g))
        gen_loss = adv_loss + scale * emd_obj.loss

        # discriminator step
        x0, x1, lam, labels = draw_batch()
        fake = x1 - model.forward(x1, np.ones(cfg.batch), np.zeros(cfg.batch), lam, labels)
        d_real, real_trace = disc.forward_tape(x0)
        d_fake, fake_trace = disc.forward_tape(fake)
        margin = d_real - d_fake
        dmargin = _sigmoid(margin) / cfg.batch
        g_real, _ = disc.backward(real_trace, dmargin)
        g_fake, _ = disc.backward(fake_trace, -dmargin)
        _, pen_real = disc.penalty_grads(x0)
        _, pen_fake = disc.penalty_grads(fake)
        d_grads = {k: g_real[k] + g_fake[k] + adv.beta * (pen_real[k] + pen_fake[k])
                   for k in g_real}
        if not np.isfinite(flatten_grads(d_grads)).all():
            raise DivergenceError(f"discriminator gradient non-finite at iteration {i}")
        disc.apply_update(adam_deltas(d_grads, d_state, adv.lr_d))

        it = i + 1
        if cfg.log_every and (it % cfg.log_every == 0 or it == adv.iters):
            rows.append(_log_row(it, gen_loss, emd_obj.diagnostics,
                                 float(np.linalg.norm(flat)), w_adaptive=w_ada))
    return TrainResult(model=model, log_rows=rows, discriminator=disc)
