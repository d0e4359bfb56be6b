"""Tiny MLP flow map with forward-mode JVPs and reverse-mode parameter gradients.

The network F(x, t, s, lam) consumes the point x concatenated with Fourier
embeddings of t, s and the guidance scale lam (and optionally a class
embedding). Time enters the embeddings directly (c_noise(t) = t); there is no
log transform anywhere on the time axis, which keeps d(embedding)/dt bounded.

Forward-mode derivatives propagate (primal, tangent) pairs through every
layer and through the embeddings, so jvp() returns the exact directional
derivative of forward(). Reverse mode runs over a tape recorded by
forward_tape(); tapes are invalidated by parameter updates.

Checkpoint layout (version 1, all bytes deterministic):
    line 1: b"FLOWMAPLAB-CKPT 1\\n"
    line 2: JSON header + b"\\n", sorted keys, containing the constructor
            arguments, the array manifest [[name, shape], ...] in sorted name
            order, the config hash string, and the sha256 hex digest of the
            payload.
    payload: the arrays from the manifest, concatenated as row-major
             little-endian float64.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DivergenceError, IntegrityError, StaleTapeError

__all__ = [
    "FourierEmbed",
    "MlpFlowMap",
    "Tape",
    "InputGrads",
    "AlignResult",
    "align_embedding",
    "default_freq_bank",
    "save_checkpoint",
    "load_checkpoint",
    "payload_hash",
]


def default_freq_bank() -> np.ndarray:
    """Frequencies {2^0 .. 2^7} * pi; max |d emb/dt| stays below 1e3."""
    return np.pi * (2.0 ** np.arange(8))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def _silu(z, sig):
    return z * sig


def _silu_d(z, sig):
    out = 1.0 - sig
    out *= z
    out += 1.0
    out *= sig
    return out


def _silu_dd(z, sig):
    out = 1.0 - 2.0 * sig
    out *= z
    out += 2.0
    out *= sig
    out *= 1.0 - sig
    return out


def _uniform_init(rng, fan_in, fan_out):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _as_col(v, n):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = np.full(n, float(v))
    if v.shape != (n,):
        raise ValueError(f"expected scalar or shape ({n},), got {v.shape}")
    return v


class FourierEmbed:
    """sin/cos features of a scalar with a fixed frequency bank and a trainable head.

    Feature amplitudes are attenuated by min(1, pi/f): every channel's input
    derivative is then at most pi at unit head weights, which keeps the
    embedding's time derivative tame while the full bank stays available.
    Without the attenuation, minibatch noise excites the top-frequency
    channels and their O(f) derivatives destabilize tangent-based objectives.

    The head is a single linear projection by default; with ``hidden`` set it
    becomes linear -> silu -> linear, which is needed when the embedding must
    imitate another embedding through a warped time axis.
    """

    def __init__(self, bank=None, width: int = 16, hidden: int | None = None, seed: int = 0,
                 attenuate: bool = True):
        self.bank = default_freq_bank() if bank is None else np.asarray(bank, dtype=float)
        self.width = int(width)
        self.hidden = None if hidden is None else int(hidden)
        self.attenuate = bool(attenuate)
        gain = np.minimum(1.0, np.pi / self.bank) if self.attenuate else np.ones_like(self.bank)
        self._gain = np.concatenate([gain, gain])
        rng = np.random.default_rng(seed)
        nfeat = 2 * len(self.bank)
        if self.hidden is None:
            self.params = {
                "W": _uniform_init(rng, nfeat, self.width),
                "b": np.zeros(self.width),
            }
        else:
            self.params = {
                "W1": _uniform_init(rng, nfeat, self.hidden),
                "b1": np.zeros(self.hidden),
                "W2": _uniform_init(rng, self.hidden, self.width),
                "b2": np.zeros(self.width),
            }
        self.version = 0

    def _features(self, u):
        ang = u[:, None] * self.bank[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1) * self._gain[None, :]

    def _features_jvp(self, u, u_dot):
        ang = u[:, None] * self.bank[None, :]
        sin, cos = np.sin(ang), np.cos(ang)
        feat = np.concatenate([sin, cos], axis=1) * self._gain[None, :]
        scaled = self.bank[None, :] * u_dot[:, None]
        dfeat = np.concatenate([cos * scaled, -sin * scaled], axis=1) * self._gain[None, :]
        return feat, dfeat

    def forward(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        feat = self._features(u)
        if self.hidden is None:
            return feat @ self.params["W"] + self.params["b"]
        z1 = feat @ self.params["W1"] + self.params["b1"]
        sig = _sigmoid(z1)
        return _silu(z1, sig) @ self.params["W2"] + self.params["b2"]

    def jvp(self, u, u_dot):
        out, dout, _ = self._jvp_full(u, u_dot)
        return out, dout

    def _jvp_full(self, u, u_dot):
        """jvp that also returns the record a later backward pass needs."""
        u = np.asarray(u, dtype=float)
        u_dot = _as_col(u_dot, len(u))
        feat, dfeat = self._features_jvp(u, u_dot)
        rec = {"u": u, "feat": feat}
        if self.hidden is None:
            W = self.params["W"]
            return feat @ W + self.params["b"], dfeat @ W, rec
        z1 = feat @ self.params["W1"] + self.params["b1"]
        dz1 = dfeat @ self.params["W1"]
        sig = _sigmoid(z1)
        rec["z1"], rec["sig1"] = z1, sig
        a1 = _silu(z1, sig)
        da1 = _silu_d(z1, sig) * dz1
        return a1 @ self.params["W2"] + self.params["b2"], da1 @ self.params["W2"], rec

    def forward_tape(self, u):
        u = np.asarray(u, dtype=float)
        feat = self._features(u)
        rec = {"u": u, "feat": feat}
        if self.hidden is None:
            out = feat @ self.params["W"] + self.params["b"]
        else:
            z1 = feat @ self.params["W1"] + self.params["b1"]
            sig = _sigmoid(z1)
            rec["z1"], rec["sig1"] = z1, sig
            out = _silu(z1, sig) @ self.params["W2"] + self.params["b2"]
        return out, rec

    def backward(self, rec, upstream):
        """Gradients of <upstream, forward(u)> w.r.t. params and u."""
        grads = {}
        feat = rec["feat"]
        if self.hidden is None:
            grads["W"] = feat.T @ upstream
            grads["b"] = upstream.sum(axis=0)
            dfeat = upstream @ self.params["W"].T
        else:
            z1, sig = rec["z1"], rec["sig1"]
            a1 = _silu(z1, sig)
            grads["W2"] = a1.T @ upstream
            grads["b2"] = upstream.sum(axis=0)
            da1 = upstream @ self.params["W2"].T
            dz1 = da1 * _silu_d(z1, sig)
            grads["W1"] = feat.T @ dz1
            grads["b1"] = dz1.sum(axis=0)
            dfeat = dz1 @ self.params["W1"].T
        ang = rec["u"][:, None] * self.bank[None, :]
        k = len(self.bank)
        scaled_bank = (self.bank * self._gain[:k])[None, :]
        du = (dfeat[:, :k] * (np.cos(ang) * scaled_bank)).sum(axis=1)
        du -= (dfeat[:, k:] * (np.sin(ang) * scaled_bank)).sum(axis=1)
        return grads, du

    def apply_update(self, deltas: dict):
        for name, delta in deltas.items():
            self.params[name] += delta
        self.version += 1

    def copy(self) -> "FourierEmbed":
        other = FourierEmbed(self.bank.copy(), self.width, self.hidden,
                             attenuate=self.attenuate)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


@dataclass
class InputGrads:
    """Cotangents of the network inputs produced by a backward pass."""

    x: np.ndarray
    t: np.ndarray
    s: np.ndarray
    lam: np.ndarray


@dataclass
class Tape:
    """Saved activations for one taped forward pass."""

    version: int
    x: np.ndarray
    t: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    labels: np.ndarray | None
    embed_recs: dict
    layer_inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    sigmoids: list = field(default_factory=list)


class MlpFlowMap:
    """F(x, t, s, lam) as a fully-connected net with smooth-gate activations.

    The output layer is zero-initialized, so the induced flow map
    x + (s - t) F(x, t, s) starts as the identity. Pass ``n_classes`` to add a
    learnable class-embedding table for conditional teachers.
    """

    def __init__(self, dim: int, hidden=(128, 128, 128), embed_width: int = 16,
                 freq_bank=None, n_classes: int | None = None,
                 class_embed_width: int = 8, seed: int = 0):
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.embed_width = int(embed_width)
        self.n_classes = None if n_classes is None else int(n_classes)
        self.class_embed_width = int(class_embed_width)
        bank = default_freq_bank() if freq_bank is None else np.asarray(freq_bank, dtype=float)
        rng = np.random.default_rng(seed)
        self.temb = FourierEmbed(bank, embed_width, seed=rng.integers(2**31))
        self.semb = FourierEmbed(bank, embed_width, seed=rng.integers(2**31))
        self.lemb = FourierEmbed(bank, embed_width, seed=rng.integers(2**31))
        in_width = self.dim + 3 * embed_width
        self.params = {}
        if self.n_classes is not None:
            self.params["cemb"] = 0.1 * rng.standard_normal((self.n_classes, class_embed_width))
            in_width += class_embed_width
        widths = [in_width, *self.hidden, self.dim]
        self.n_layers = len(widths) - 1
        for i in range(self.n_layers):
            self.params[f"W{i}"] = _uniform_init(rng, widths[i], widths[i + 1])
            self.params[f"b{i}"] = np.zeros(widths[i + 1])
        self.params[f"W{self.n_layers - 1}"][:] = 0.0
        self.version = 0

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        """All trainable arrays as (name, array), embeds included."""
        out = []
        for prefix, emb in (("temb", self.temb), ("semb", self.semb), ("lemb", self.lemb)):
            out.extend((f"{prefix}.{k}", v) for k, v in emb.params.items())
        out.extend(self.params.items())
        return out

    def param_dict(self):
        return dict(self.parameters())

    def zero_grads(self):
        return {name: np.zeros_like(arr) for name, arr in self.parameters()}

    def apply_update(self, deltas: dict):
        """Add deltas to the parameters in place; invalidates existing tapes."""
        for name, delta in deltas.items():
            self._lookup(name)[...] += delta
        self.version += 1

    def assign(self, values: dict):
        for name, value in values.items():
            self._lookup(name)[...] = value
        self.version += 1

    def _lookup(self, name: str) -> np.ndarray:
        if "." in name:
            prefix, key = name.split(".", 1)
            return {"temb": self.temb, "semb": self.semb, "lemb": self.lemb}[prefix].params[key]
        return self.params[name]

    def copy(self) -> "MlpFlowMap":
        other = MlpFlowMap(self.dim, self.hidden, self.embed_width, self.temb.bank.copy(),
                           self.n_classes, self.class_embed_width)
        other.assign({k: v.copy() for k, v in self.parameters()})
        return other

    @property
    def final_layer_names(self):
        i = self.n_layers - 1
        return (f"W{i}", f"b{i}")

    # -- evaluation ---------------------------------------------------------

    def _coerce(self, x, t, s, lam, labels):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise ValueError(f"expected points of dim {self.dim}, got {x.shape}")
        n = x.shape[0]
        t = _as_col(t, n)
        s = _as_col(s, n)
        lam = np.ones(n) if lam is None else _as_col(lam, n)
        if labels is not None:
            labels = np.asarray(labels, dtype=int)
            if self.n_classes is None:
                raise ValueError("model has no class embedding but labels were given")
        elif self.n_classes is not None:
            raise ValueError("conditional model requires labels")
        return x, t, s, lam, labels

    def _assemble(self, x, et, es, el, labels):
        parts = [x, et, es, el]
        if labels is not None:
            parts.append(self.params["cemb"][labels])
        return np.concatenate(parts, axis=1)

    def forward(self, x, t, s, lam=None, labels=None) -> np.ndarray:
        x, t, s, lam, labels = self._coerce(x, t, s, lam, labels)
        h = self._assemble(x, self.temb.forward(t), self.semb.forward(s),
                           self.lemb.forward(lam), labels)
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h = _silu(z, _sigmoid(z)) if i < self.n_layers - 1 else z
        return h

    def jvp(self, x, t, s, lam=None, x_dot=None, t_dot=0.0, s_dot=0.0, labels=None,
            record_tape: bool = False):
        """Value and exact directional derivative of forward().

        The tangent seed is (x_dot, t_dot, s_dot); the guidance scale and the
        class embedding are treated as constants. With record_tape=True the
        primal pass is additionally recorded and (value, tangent, tape) is
        returned, saving the separate taped forward when the same parameters
        serve as their own frozen copy.
        """
        x, t, s, lam, labels = self._coerce(x, t, s, lam, labels)
        n = x.shape[0]
        x_dot = np.zeros_like(x) if x_dot is None else np.atleast_2d(np.asarray(x_dot, dtype=float))
        et, det, rec_t = self.temb._jvp_full(t, _as_col(t_dot, n))
        es, des, rec_s = self.semb._jvp_full(s, _as_col(s_dot, n))
        el, rec_l = self.lemb.forward_tape(lam)
        h = self._assemble(x, et, es, el, labels)
        parts = [x_dot, det, des, np.zeros_like(el)]
        if labels is not None:
            parts.append(np.zeros((n, self.class_embed_width)))
        hd = np.concatenate(parts, axis=1)
        tape = None
        if record_tape:
            tape = Tape(version=self.version, x=x, t=t, s=s, lam=lam, labels=labels,
                        embed_recs={"temb": rec_t, "semb": rec_s, "lemb": rec_l})
        for i in range(self.n_layers):
            W = self.params[f"W{i}"]
            if tape is not None:
                tape.layer_inputs.append(h)
            z = h @ W + self.params[f"b{i}"]
            zd = hd @ W
            if i < self.n_layers - 1:
                sig = _sigmoid(z)
                if tape is not None:
                    tape.preacts.append(z)
                    tape.sigmoids.append(sig)
                h = _silu(z, sig)
                hd = _silu_d(z, sig) * zd
            else:
                h, hd = z, zd
        if record_tape:
            return h, hd, tape
        return h, hd

    def forward_tape(self, x, t, s, lam=None, labels=None):
        x, t, s, lam, labels = self._coerce(x, t, s, lam, labels)
        et, rec_t = self.temb.forward_tape(t)
        es, rec_s = self.semb.forward_tape(s)
        el, rec_l = self.lemb.forward_tape(lam)
        tape = Tape(version=self.version, x=x, t=t, s=s, lam=lam, labels=labels,
                    embed_recs={"temb": rec_t, "semb": rec_s, "lemb": rec_l})
        h = self._assemble(x, et, es, el, labels)
        for i in range(self.n_layers):
            tape.layer_inputs.append(h)
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                sig = _sigmoid(z)
                tape.preacts.append(z)
                tape.sigmoids.append(sig)
                h = _silu(z, sig)
            else:
                h = z
        return h, tape

    def backward(self, tape: Tape, upstream):
        """Gradient of <upstream, F> w.r.t. every parameter plus input cotangents."""
        if tape.version != self.version:
            raise StaleTapeError("parameters changed since this tape was recorded")
        upstream = np.asarray(upstream, dtype=float)
        grads = {}
        delta = upstream
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                delta = delta * _silu_d(tape.preacts[i], tape.sigmoids[i])
            h_in = tape.layer_inputs[i]
            grads[f"W{i}"] = h_in.T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            delta = delta @ self.params[f"W{i}"].T
        w = self.embed_width
        dx = delta[:, :self.dim]
        det = delta[:, self.dim:self.dim + w]
        des = delta[:, self.dim + w:self.dim + 2 * w]
        del_ = delta[:, self.dim + 2 * w:self.dim + 3 * w]
        gt, dt = self.temb.backward(tape.embed_recs["temb"], det)
        gs, ds = self.semb.backward(tape.embed_recs["semb"], des)
        gl, dl = self.lemb.backward(tape.embed_recs["lemb"], del_)
        grads.update({f"temb.{k}": v for k, v in gt.items()})
        grads.update({f"semb.{k}": v for k, v in gs.items()})
        grads.update({f"lemb.{k}": v for k, v in gl.items()})
        if tape.labels is not None:
            dcls = delta[:, self.dim + 3 * w:]
            gc = np.zeros_like(self.params["cemb"])
            np.add.at(gc, tape.labels, dcls)
            grads["cemb"] = gc
        return grads, InputGrads(x=dx, t=dt, s=ds, lam=dl)


# -- embedding alignment ----------------------------------------------------


@dataclass
class AlignResult:
    initial_mse: float
    final_mse: float
    history: list  # (iteration, held-out mse) at recorded checkpoints


def _default_original_time_map(t):
    return np.log(t / (1.0 - t))


def align_embedding(new_embed: FourierEmbed, original_embed: FourierEmbed,
                    iterations: int = 2000, *, time_sampler=None,
                    original_time_map=_default_original_time_map,
                    batch: int = 512, lr: float = 3e-3, seed: int = 0,
                    delta: float = 1e-3, eval_every: int = 250,
                    holdout_points: int = 513) -> AlignResult:
    """Train new_embed(t) to match original_embed(original_time_map(t)).

    Times are sampled on the interior [delta, 1-delta] so the default log-sigma
    map stays finite. Held-out MSE on a fixed interior grid is recorded every
    ``eval_every`` iterations.
    """
    if new_embed.width != original_embed.width:
        raise ValueError("embeddings must share their output width")
    rng = np.random.default_rng(seed)
    if time_sampler is None:
        time_sampler = lambda r, n: r.uniform(delta, 1.0 - delta, n)
    grid = np.linspace(delta, 1.0 - delta, holdout_points)
    grid_target = original_embed.forward(original_time_map(grid))

    def holdout_mse():
        return float(np.mean((new_embed.forward(grid) - grid_target) ** 2))

    state_m = {k: np.zeros_like(v) for k, v in new_embed.params.items()}
    state_v = {k: np.zeros_like(v) for k, v in new_embed.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    initial = holdout_mse()
    history = [(0, initial)]
    for it in range(1, iterations + 1):
        ts = time_sampler(rng, batch)
        target = original_embed.forward(original_time_map(ts))
        pred, rec = new_embed.forward_tape(ts)
        resid = pred - target
        loss = float(np.mean(resid ** 2))
        if not np.isfinite(loss):
            raise DivergenceError(f"alignment loss became non-finite at iteration {it}")
        grads, _ = new_embed.backward(rec, 2.0 * resid / resid.size)
        deltas = {}
        for k, g in grads.items():
            state_m[k] = beta1 * state_m[k] + (1 - beta1) * g
            state_v[k] = beta2 * state_v[k] + (1 - beta2) * g * g
            mh = state_m[k] / (1 - beta1 ** it)
            vh = state_v[k] / (1 - beta2 ** it)
            deltas[k] = -lr * mh / (np.sqrt(vh) + eps)
        new_embed.apply_update(deltas)
        if it % eval_every == 0 or it == iterations:
            history.append((it, holdout_mse()))
    return AlignResult(initial_mse=initial, final_mse=history[-1][1], history=history)


# -- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"FLOWMAPLAB-CKPT 1\n"


def _payload_bytes(model: MlpFlowMap):
    names = sorted(name for name, _ in model.parameters())
    arrays = dict(model.parameters())
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names)
    manifest = [[n, list(arrays[n].shape)] for n in names]
    return payload, manifest


def payload_hash(model: MlpFlowMap) -> str:
    payload, _ = _payload_bytes(model)
    return hashlib.sha256(payload).hexdigest()


def save_checkpoint(model: MlpFlowMap, path, config_hash: str = "") -> str:
    """Write the model to `path`; returns the payload sha256."""
    payload, manifest = _payload_bytes(model)
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "arrays": manifest,
        "class_embed_width": model.class_embed_width,
        "config_hash": config_hash,
        "dim": model.dim,
        "embed_width": model.embed_width,
        "freq_bank": [float(f) for f in model.temb.bank],
        "hidden": list(model.hidden),
        "n_classes": model.n_classes,
        "payload_sha256": digest,
    }
    blob = _CKPT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    with open(path, "wb") as fh:
        fh.write(blob)
    return digest


def load_checkpoint(path, expected_config_hash: str | None = None):
    """Read a checkpoint; returns (model, header). Raises IntegrityError on mismatch."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_CKPT_MAGIC):
        raise IntegrityError(f"{path}: not a flowmaplab checkpoint")
    rest = blob[len(_CKPT_MAGIC):]
    header_line, _, payload = rest.partition(b"\n")
    header = json.loads(header_line)
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise IntegrityError(f"{path}: checkpoint was produced by a different config")
    model = MlpFlowMap(
        dim=header["dim"], hidden=tuple(header["hidden"]),
        embed_width=header["embed_width"], freq_bank=np.array(header["freq_bank"]),
        n_classes=header["n_classes"], class_embed_width=header["class_embed_width"],
    )
    values = {}
    offset = 0
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).reshape(shape)
        values[name] = arr.astype(float)
        offset += size * 8
    model.assign(values)
    return model, header
