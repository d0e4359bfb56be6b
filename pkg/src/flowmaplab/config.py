"""Flat key = value experiment configuration: parsing, resolution, hashing.

The format is plain text, one `key = value` per line, `#` comments, no
sections. Unknown keys are rejected by name. The resolved form fills every
known key (defaults included) in sorted order; its sha256 is the config hash
recorded in checkpoints and output manifests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .net import MlpFlowMap
from .objectives import EmdConfig
from .teachers import GaussianTeacher, GmmTeacher, GuidanceSpec, make_ring_teacher, make_weak_teacher
from .trainer import AdvConfig, TrainConfig
from .gaussian_world import GaussianWorld

__all__ = ["ExperimentConfig", "parse_config_text", "resolve_config", "resolved_text",
           "config_hash", "load_config"]


def _parse_bool(v):
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _parse_opt_float(v):
    return None if v.lower() == "none" else float(v)


def _parse_int_tuple(v):
    return tuple(int(p) for p in v.split(",") if p.strip())


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
KNOWN_KEYS = {
    "domain": (str, "gaussian"),
    "dim": (int, 2),
    "gauss_c": (float, 0.5),
    "ring_k": (int, 8),
    "ring_radius": (float, 4.0),
    "ring_std": (float, 0.2),
    "ring_labeled": (_parse_bool, False),
    "guidance": (str, "none"),
    "weak_multiplier": (float, 2.0),
    "weak_seed": (int, 7),
    "objective": (str, "emd"),
    "iters": (int, 20000),
    "batch": (int, 512),
    "lr": (float, 1e-3),
    "lr_schedule": (str, "hold-exponential"),
    "seed": (int, 0),
    "p_mean": (float, -0.6),
    "p_std": (float, 1.6),
    "sigma_d": (float, 1.0),
    "lambda_min": (float, 1.0),
    "lambda_max": (float, 1.0),
    "ema_decay": (_parse_opt_float, None),
    "emd_c_norm": (float, 0.1),
    "emd_warmup": (int, 10000),
    "emd_r_max": (float, 0.99),
    "emd_weighting": (str, "inverse_squared"),
    "lmd_s_min": (float, 1e-3),
    "hidden": (_parse_int_tuple, (128, 128, 128)),
    "embed_width": (int, 16),
    "model_seed": (int, 0),
    "log_every": (int, 100),
    "checkpoint_every": (int, 0),
    "adv_alpha": (float, 0.1),
    "adv_beta": (float, 0.1),
    "adv_lr_g": (float, 2e-4),
    "adv_lr_d": (float, 5e-4),
    "adv_iters": (int, 3000),
    "adv_disc_hidden": (_parse_int_tuple, (128, 128)),
}


def parse_config_text(text: str) -> dict:
    """Raw key -> string-value mapping; rejects unknown and duplicate keys."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


@dataclass
class ExperimentConfig:
    """Typed view of a fully resolved configuration."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            p_mean=v["p_mean"], p_std=v["p_std"],
            lambda_min=v["lambda_min"], lambda_max=v["lambda_max"],
            sigma_d=v["sigma_d"], lr=v["lr"], lr_schedule=v["lr_schedule"],
            batch=v["batch"], iters=v["iters"],
            seed=v["seed"], objective=v["objective"],
            emd=EmdConfig(c_norm=v["emd_c_norm"], warmup_iters=v["emd_warmup"],
                          r_max=v["emd_r_max"], weighting=v["emd_weighting"]),
            ema_decay=v["ema_decay"], lmd_s_min=v["lmd_s_min"],
            log_every=v["log_every"], checkpoint_every=v["checkpoint_every"],
        )

    def adv_config(self) -> AdvConfig:
        v = self.values
        return AdvConfig(alpha=v["adv_alpha"], beta=v["adv_beta"], lr_g=v["adv_lr_g"],
                         lr_d=v["adv_lr_d"], disc_hidden=v["adv_disc_hidden"],
                         iters=v["adv_iters"])

    @property
    def conditional(self) -> bool:
        return self.values["guidance"] == "cfg"

    def build_teacher(self):
        v = self.values
        if v["domain"] == "gaussian":
            return GaussianTeacher(GaussianWorld(c=v["gauss_c"], dim=v["dim"]))
        if v["domain"] == "ring":
            labeled = v["ring_labeled"] or v["guidance"] == "cfg"
            return make_ring_teacher(k=v["ring_k"], radius=v["ring_radius"],
                                     comp_std=v["ring_std"], labeled=labeled,
                                     sigma_d=v["sigma_d"])
        raise ConfigError(f"unknown domain {v['domain']!r}")

    def build_guidance(self, teacher) -> GuidanceSpec:
        v = self.values
        mode = v["guidance"]
        if mode == "none":
            return GuidanceSpec()
        if mode == "autoguidance":
            if not isinstance(teacher, GmmTeacher):
                raise ConfigError("autoguidance needs a mixture teacher to degrade")
            weak = make_weak_teacher(teacher, v["weak_multiplier"], v["weak_seed"])
            return GuidanceSpec(lam=max(1.0, v["lambda_min"]), mode="autoguidance", weak=weak)
        if mode == "cfg":
            return GuidanceSpec(lam=max(1.0, v["lambda_min"]), mode="cfg", uncond=teacher)
        raise ConfigError(f"unknown guidance mode {mode!r}")

    def build_model(self) -> MlpFlowMap:
        v = self.values
        dim = v["dim"] if v["domain"] == "gaussian" else 2
        n_classes = v["ring_k"] if self.conditional else None
        return MlpFlowMap(dim=dim, hidden=v["hidden"], embed_width=v["embed_width"],
                          n_classes=n_classes, seed=v["model_seed"])


def resolve_config(raw: dict) -> ExperimentConfig:
    values = {}
    for key, (parser, default) in KNOWN_KEYS.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for key {key!r}: {exc}") from exc
        else:
            values[key] = default
    cfg = ExperimentConfig(values)
    cfg.train_config()   # fail fast on inconsistent values
    if values["guidance"] not in ("none", "autoguidance", "cfg"):
        raise ConfigError(f"unknown guidance mode {values['guidance']!r}")
    if values["guidance"] != "none" and values["domain"] == "gaussian":
        raise ConfigError("guided distillation needs the ring domain")
    return cfg


def resolved_text(cfg: ExperimentConfig) -> str:
    lines = [f"{key} = {_fmt(cfg.values[key])}" for key in sorted(KNOWN_KEYS)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(resolved_text(cfg).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return resolve_config(parse_config_text(fh.read()))
