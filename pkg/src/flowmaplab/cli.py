"""Experiment driver.

Subcommands:
    thm1    analytic + Monte-Carlo multistep degradation sweep (CSV)
    train   distill a student per a config file; --adversarial finetunes
    sample  draw points from a checkpoint (CSV + metadata sidecar)
    ablate  matched-budget objective or guidance comparisons (CSV)

Exit codes: 0 success, 1 config error, 2 I/O error, 3 divergence,
4 checkpoint integrity. Every output directory receives the resolved config,
its hash and the tool version; reruns with identical config and seed produce
byte-identical CSVs and checkpoints. Wall-clock timings go to a non-CSV
sidecar (timing.txt) so timing noise never touches the deterministic outputs.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_hash, load_config, resolved_text
from .errors import ConfigError, DivergenceError, IntegrityError
from .gaussian_world import (GaussianWorld, PerturbedCM, multistep_cm_variance,
                             simulate_multistep_cm, w2_isotropic)
from .metrics import student_w2_protocol
from .net import load_checkpoint, save_checkpoint
from .trainer import adversarial_finetune, train

__all__ = ["main"]


def _fmt_float(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt_float(v) if isinstance(v, float) else str(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


@contextlib.contextmanager
def _locked_outdir(out):
    os.makedirs(out, exist_ok=True)
    lock = os.path.join(out, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"output directory {out} is locked by another writer "
                      f"(remove {lock} if stale)")
    try:
        os.close(fd)
        yield out
    finally:
        with contextlib.suppress(OSError):
            os.remove(lock)


def _write_manifest(out, cfg: ExperimentConfig | None):
    manifest = {"version": __version__}
    if cfg is not None:
        text = resolved_text(cfg)
        manifest["config_hash"] = config_hash(cfg)
        with open(os.path.join(out, "config.resolved.cfg"), "w", encoding="utf-8") as fh:
            fh.write(text)
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_log(out, rows):
    header = ["iter", "loss", "r", "grad_norm", "raw_tangent_norm_mean", "rejected",
              "w_adaptive"]
    table = []
    for row in rows:
        table.append([
            row["iter"], float(row["loss"]), float(row["r"]), float(row["grad_norm"]),
            float(row["raw_tangent_norm_mean"]) if not math.isnan(row["raw_tangent_norm_mean"]) else float("nan"),
            row["rejected"],
            _fmt_float(row["w_adaptive"]) if row["w_adaptive"] != "" else "",
        ])
    _write_csv(os.path.join(out, "log.csv"), header, table)


# -- thm1 -----------------------------------------------------------------------


def cmd_thm1(args) -> int:
    world = GaussianWorld(c=args.c, dim=args.dim)
    model = PerturbedCM(world, eps=args.eps)
    steps = []
    n = 1
    while n <= args.max_steps:
        steps.append(n)
        n *= 2
    rows = []
    for n in steps:
        var = multistep_cm_variance(n, world, args.eps)
        w2_a = w2_isotropic(var, world)
        samples = simulate_multistep_cm(n, model, args.mc_samples, seed=args.seed + n)
        var_mc = float(np.mean(samples ** 2))
        w2_mc = w2_isotropic(var_mc, world)
        rows.append([n, var, w2_a, w2_mc, args.eps, args.c])
    with _locked_outdir(args.out) as out:
        _write_manifest(out, None)
        _write_csv(os.path.join(out, "thm1.csv"),
                   ["n", "variance", "w2_analytic", "w2_montecarlo", "eps", "c"], rows)
    return 0


# -- train ------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    chash = config_hash(cfg)
    teacher = cfg.build_teacher()
    guidance = cfg.build_guidance(teacher)
    tcfg = cfg.train_config()
    with _locked_outdir(args.out) as out:
        _write_manifest(out, cfg)
        log_rows = []
        t0 = time.perf_counter()
        try:
            if args.adversarial:
                if not args.init:
                    raise ConfigError("--adversarial requires --init CHECKPOINT")
                model, _ = load_checkpoint(args.init)
                result = adversarial_finetune(model, teacher, tcfg, cfg.adv_config(),
                                              guidance=guidance, conditional=cfg.conditional,
                                              log_rows=log_rows)
            else:
                model = cfg.build_model()

                def on_checkpoint(it, m):
                    save_checkpoint(m, os.path.join(out, f"checkpoint_{it:06d}.fmckpt"), chash)

                result = train(model, teacher, tcfg, guidance=guidance,
                               conditional=cfg.conditional, log_rows=log_rows,
                               on_checkpoint=on_checkpoint if tcfg.checkpoint_every else None)
        except DivergenceError:
            _write_log(out, log_rows)
            raise
        elapsed_ms = 1000.0 * (time.perf_counter() - t0)
        _write_log(out, log_rows)
        save_checkpoint(result.model, os.path.join(out, "checkpoint.fmckpt"), chash)
        with open(os.path.join(out, "timing.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"wallclock_ms {elapsed_ms:.1f}\n")
    return 0


# -- sample -----------------------------------------------------------------------


def cmd_sample(args) -> int:
    from .flowmap import SamplerSchedule, gamma_sample

    expected = None
    if args.config:
        expected = config_hash(load_config(args.config))
    model, header = load_checkpoint(args.checkpoint, expected_config_hash=expected)
    schedule = SamplerSchedule.uniform(args.steps, gamma=args.gamma, seed=args.seed)
    labels = None
    if model.n_classes is not None:
        labels = np.random.default_rng([args.seed, 7]).integers(0, model.n_classes, args.n)
    points = gamma_sample(model, schedule, n=args.n, lam=args.guidance_scale,
                          labels=labels, sigma_d=args.sigma_d)
    with _locked_outdir(args.out) as out:
        _write_manifest(out, None)
        header_cols = ["chain"] + [f"dim{i}" for i in range(points.shape[1])]
        rows = [[i, *[float(v) for v in point]] for i, point in enumerate(points)]
        _write_csv(os.path.join(out, "samples.csv"), header_cols, rows)
        meta = {
            "gamma": args.gamma,
            "lambda": args.guidance_scale,
            "model_hash": header["payload_sha256"],
            "n": args.n,
            "seed": args.seed,
            "sigma_d": args.sigma_d,
            "steps": args.steps,
            "timesteps": [float(t) for t in schedule.timesteps],
        }
        with open(os.path.join(out, "metadata.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0


# -- ablate -----------------------------------------------------------------------


def _base_ring_config(overrides: dict) -> ExperimentConfig:
    from .config import resolve_config
    raw = {"domain": "ring"}
    raw.update({k: str(v) for k, v in overrides.items()})
    return resolve_config(raw)


def _eval_arm(model, teacher, steps_list, gamma, lam, n_classes):
    out = {}
    for steps in steps_list:
        mean, std, _ = student_w2_protocol(model, teacher, steps, gamma=gamma, lam=lam,
                                           n_classes=n_classes)
        out[steps] = (mean, std)
    return out


def cmd_ablate(args) -> int:
    steps_list = (1, 2, 4, 8)
    rows = []
    if args.suite == "objectives":
        arms = ["emd", "lmd", "cm", "shortcut"]
        for arm in arms:
            cfg = _base_ring_config({"objective": arm, "iters": args.iters,
                                     "seed": args.seed})
            teacher = cfg.build_teacher()
            try:
                result = train(cfg.build_model(), teacher, cfg.train_config())
                gamma = 1.0 if arm == "cm" else 0.0
                scores = _eval_arm(result.model, teacher, steps_list, gamma, None, None)
                for steps in steps_list:
                    mean, std = scores[steps]
                    rows.append([args.suite, arm, steps, mean, std, "ok"])
            except (DivergenceError, ValueError) as exc:
                for steps in steps_list:
                    rows.append([args.suite, arm, steps, float("nan"), float("nan"),
                                 f"error:{type(exc).__name__}"])
    elif args.suite == "guidance":
        arms = [("none", "none", None), ("autoguidance", "autoguidance", 1.5),
                ("cfg", "cfg", 3.0)]
        for name, mode, eval_lam in arms:
            overrides = {"objective": "emd", "iters": args.iters, "seed": args.seed,
                         "guidance": mode}
            if mode != "none":
                overrides.update({"lambda_min": 1.0, "lambda_max": 3.0})
            cfg = _base_ring_config(overrides)
            teacher = cfg.build_teacher()
            try:
                result = train(cfg.build_model(), teacher, cfg.train_config(),
                               guidance=cfg.build_guidance(teacher),
                               conditional=cfg.conditional)
                n_classes = cfg.values["ring_k"] if cfg.conditional else None
                scores = _eval_arm(result.model, teacher, steps_list, 0.0, eval_lam, n_classes)
                for steps in steps_list:
                    mean, std = scores[steps]
                    rows.append([args.suite, name, steps, mean, std, "ok"])
            except (DivergenceError, ValueError) as exc:
                for steps in steps_list:
                    rows.append([args.suite, name, steps, float("nan"), float("nan"),
                                 f"error:{type(exc).__name__}"])
    else:
        raise ConfigError(f"unknown suite {args.suite!r}")
    with _locked_outdir(args.out) as out:
        _write_manifest(out, None)
        _write_csv(os.path.join(out, "ablation.csv"),
                   ["suite", "arm", "steps", "w2_mean", "w2_std", "status"], rows)
    return 0


# -- entry point --------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowmaplab",
                                     description="flow-map distillation lab")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("thm1", help="multistep consistency degradation sweep")
    p.add_argument("--c", type=float, default=0.5)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--max-steps", type=int, default=256)
    p.add_argument("--mc-samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_thm1)

    p = sub.add_parser("train", help="distill a student per a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--adversarial", action="store_true",
                   help="run adversarial finetuning instead of distillation")
    p.add_argument("--init", default=None, help="checkpoint to finetune from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw points from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None, help="cross-check the config hash")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--lambda", dest="guidance_scale", type=float, default=1.0)
    p.add_argument("--sigma-d", type=float, default=1.0)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("ablate", help="matched-budget comparison suites")
    p.add_argument("--suite", choices=("objectives", "guidance"), required=True)
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except IntegrityError as exc:
        print(f"integrity: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
