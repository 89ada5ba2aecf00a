"""Command-line entry point: train, eval, attack, profile, sweep, alpha-stats.

Every run resolves a flat config (defaults < --config file < --set overrides
< --seed), writes it to ``<out>/resolved_config.json`` and then executes.
Exit codes: 0 success, 1 usage or config problem, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis, persist
from .advtrain import AttackConfig, TrainConfig, accuracy, pgd, train
from .data import Dataset, SynthSpec, load_cifar10, synth_dataset
from .errors import ConfigError, FreqBiasError
from .model import Model, ModelConfig

log = logging.getLogger("freqbias")

MODEL_KEYS = {f"model_{f.name}": f.name for f in fields(ModelConfig) if f.name != "in_shape"}


@dataclass
class RunConfig:
    seed: int = 0
    # data
    dataset: str = "synthetic"  # synthetic | cifar10
    data_root: str = ""
    train_limit: int = 5000
    eval_limit: int = 1000
    synth_classes: int = 10
    synth_per_class: int = 100
    synth_eval_per_class: int = 50
    synth_size: int = 16
    synth_amplitude: float = 0.2
    synth_noise: float = 0.05
    synth_clutter: float = 0.3
    # model
    model_stages: list = field(default_factory=lambda: [[16, 2], [32, 2], [64, 2]])
    model_classes: int = 10
    model_norm: str = "batch"
    model_fpcm_placement: str = "per_stage_end"
    model_fpcm_sites: list = field(default_factory=list)
    model_fpcm_mode: str = "conv"
    model_fpcm_alpha: float = 0.75
    model_fpcm_kernel: int = 3
    model_fpcm_hidden: int = 16
    model_fpcm_filter: str = "gaussian"
    model_fpcm_beta: float = 0.5
    model_fpcm_detached: bool = False
    # training
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list = field(default_factory=lambda: [0.7, 0.9])
    lr_decay: float = 0.1
    objective: str = "pgd_at"
    trades_beta: float = 6.0
    beta_schedule: str = "linear"
    beta_start: float = 0.5
    beta_end: float = 0.125
    beta_fixed: float = 0.125
    augment: bool = False
    eval_every: int = 0
    # attacks / evaluation
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    train_steps: int = 10
    eval_steps: int = 20
    random_start: bool = True
    beta_eval: float = 0.125
    pi_nat: float = 0.5
    pi_adv: float = 0.5
    # analyses
    profile_beta: float = 0.125
    profile_samples: int = 256
    sweep_betas: list = field(default_factory=lambda: [0.0625, 0.125, 0.25, 0.5, 1.0])
    sweep_eps: float = 16 / 255
    sweep_draws: int = 3
    alpha_samples: int = 256

    def model_config(self, in_shape) -> ModelConfig:
        d = {name: getattr(self, key) for key, name in MODEL_KEYS.items()}
        return ModelConfig(in_shape=list(in_shape), **d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, milestones=list(self.milestones), lr_decay=self.lr_decay,
            objective=self.objective, trades_beta=self.trades_beta, beta_schedule=self.beta_schedule,
            beta_start=self.beta_start, beta_end=self.beta_end, beta_fixed=self.beta_fixed,
            beta_eval=self.beta_eval, eval_steps=self.eval_steps, eval_every=self.eval_every,
            augment=self.augment, seed=self.seed)

    def attack_config(self, steps: int) -> AttackConfig:
        return AttackConfig(self.epsilon, self.step_size, steps, self.random_start)


def _coerce(key: str, value, default):
    """Convert a raw config value to the type of the field default."""
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes"):
                return True
            if isinstance(value, str) and value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            v = json.loads(value) if isinstance(value, str) else value
            if not isinstance(v, list):
                raise ValueError(value)
            return v
        return str(value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def resolve_config(config_path: Optional[str], overrides: list[str], seed: Optional[int]) -> RunConfig:
    defaults = asdict(RunConfig())
    merged = dict(defaults)
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise ConfigError(f"config file {config_path} not found")
        try:
            doc = json.loads(p.read_text())
        except ValueError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a flat JSON object")
        for k, v in doc.items():
            if k not in defaults:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v, defaults[k])
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip()
        if k not in defaults:
            raise ConfigError(f"unknown config key {k!r}")
        merged[k] = _coerce(k, v, defaults[k])
    if seed is not None:
        merged["seed"] = seed
    return RunConfig(**merged)


# ---------------------------------------------------------------------------
# data / model plumbing
# ---------------------------------------------------------------------------

def load_data(rc: RunConfig, split: str, data_arg: Optional[str]) -> Dataset:
    if rc.dataset == "cifar10" or data_arg:
        root = data_arg or rc.data_root or None
        limit = rc.train_limit if split == "train" else rc.eval_limit
        return load_cifar10(root, split, limit or None)
    if rc.dataset != "synthetic":
        raise ConfigError(f"unknown dataset {rc.dataset!r}")
    per = rc.synth_per_class if split == "train" else rc.synth_eval_per_class
    spec = SynthSpec(classes=rc.synth_classes, per_class=per, size=rc.synth_size,
                     amplitude=rc.synth_amplitude, noise=rc.synth_noise, clutter=rc.synth_clutter,
                     seed=rc.seed, split=split)
    return synth_dataset(spec)


def _in_shape(d: Dataset) -> list:
    return list(d.images.shape[1:])


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _snapshot(rc: RunConfig, out: Path, command: str) -> None:
    d = asdict(rc)
    d["command"] = command
    persist.save_report(d, out / "resolved_config.json")


def _checkpoint(args) -> Model:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this subcommand")
    model, _ = persist.load(args.checkpoint)
    return model


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(rc: RunConfig, args, out: Path) -> int:
    data = load_data(rc, "train", args.data)
    eval_data = load_data(rc, "test", args.data) if rc.eval_every else None
    model = Model(rc.model_config(_in_shape(data)), rc.seed)
    result = train(model, data, rc.train_config(), rc.attack_config(rc.train_steps), eval_data,
                   log_path=out / "epoch_log.jsonl")
    persist.save(model, {"epoch": rc.epochs, "seed": rc.seed}, out / "checkpoint.fqb")
    log.info("trained %d epochs; final train loss %.4f", rc.epochs, result.epoch_log[-1]["train_loss"])
    return 0


def cmd_eval(rc: RunConfig, args, out: Path) -> int:
    model = _checkpoint(args)
    data = load_data(rc, "test", args.data)
    rep = analysis.evaluate_robustness(model, data, rc.attack_config(rc.eval_steps), rc.seed, rc.beta_eval,
                                       rc.pi_nat, rc.pi_adv, model_id=str(args.checkpoint))
    persist.save_report(rep, out / "robustness.json")
    print(f"clean {rep.clean_acc:.4f}  robust {rep.robust_acc[rep.primary_attack]:.4f}  w_robust {rep.w_robust:.4f}")
    return 0


def cmd_attack(rc: RunConfig, args, out: Path) -> int:
    model = _checkpoint(args)
    model.set_beta(rc.beta_eval)
    data = load_data(rc, "test", args.data)
    ac = rc.attack_config(rc.eval_steps)
    rng = np.random.default_rng(rc.seed)
    advs = []
    for i in range(0, len(data), 256):
        xb, yb = data.images[i:i + 256], data.labels[i:i + 256]
        advs.append(pgd(model, xb, yb, ac, rng))
    x_adv = np.concatenate(advs) if advs else data.images.copy()
    ok = accuracy(model, data.images, data.labels)
    still = accuracy(model, x_adv, data.labels)
    n_ok = int(ok.sum())
    report = {"samples": len(data), "clean_acc": float(ok.mean()), "robust_acc": float((ok & still).mean()),
              "success_rate": float((ok & ~still).sum() / n_ok) if n_ok else 0.0,
              "max_linf": float(np.abs(x_adv - data.images).max()) if len(data) else 0.0,
              "epsilon": ac.epsilon, "steps": ac.steps, "seed": rc.seed}
    np.save(out / "adversarial.npy", x_adv)
    persist.save_report(report, out / "attack.json")
    return 0


def cmd_profile(rc: RunConfig, args, out: Path) -> int:
    model = _checkpoint(args)
    data = load_data(rc, "test", args.data).head(rc.profile_samples)
    prof = analysis.layer_freq_profile(model, data, rc.profile_beta)
    persist.save_report(prof, out / "profile.json")
    analysis.profile_csv(prof, out / "profile.csv")
    return 0


def cmd_sweep(rc: RunConfig, args, out: Path) -> int:
    model = _checkpoint(args)
    model.set_beta(rc.beta_eval)
    data = load_data(rc, "test", args.data)
    rep = analysis.freq_noise_sweep(model, data, rc.sweep_betas, rc.sweep_eps, rc.sweep_draws, rc.seed)
    persist.save_report(rep, out / "sweep.json")
    analysis.sweep_csv(rep, out / "sweep.csv")
    return 0


def cmd_alpha_stats(rc: RunConfig, args, out: Path) -> int:
    model = _checkpoint(args)
    model.set_beta(rc.beta_eval)
    data = load_data(rc, "test", args.data).head(rc.alpha_samples)
    stats = analysis.alpha_stats(model, data)
    persist.save_report({"stages": [asdict(s) for s in stats]}, out / "alpha_stats.json")
    analysis.alpha_csv(stats, out / "alpha_stats.csv")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "profile": cmd_profile,
    "sweep": cmd_sweep,
    "alpha-stats": cmd_alpha_stats,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="freqbias", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat JSON config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", default="runs/latest", help="output directory")
        s.add_argument("--data", help="CIFAR-10 binary directory (implies dataset=cifar10)")
        s.add_argument("--checkpoint", help="checkpoint to read")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve_config(args.config, args.set, args.seed)
        out = _out_dir(args.out)
        _snapshot(rc, out, args.command)
        return COMMANDS[args.command](rc, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FreqBiasError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
