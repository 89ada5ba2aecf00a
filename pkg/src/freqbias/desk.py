"""Desk-scale recipes shared by the acceptance suite and the scripts.

Sizes are chosen so a full PGD-AT run finishes in about a minute on one CPU
core while keeping the ratios of the reference recipe (lr 0.01, decays at
0.7T / 0.9T, PGD-10 train / PGD-20 eval, eps 8/255, step 2/255).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .advtrain import AttackConfig, TrainConfig, evaluate, train
from .data import Dataset, SynthSpec, load_cifar10, synth_dataset
from .model import Model, ModelConfig


@dataclass
class DeskRecipe:
    size: int = 16
    per_class: int = 20
    eval_per_class: int = 20
    clutter: float = 0.3
    stages: list = field(default_factory=lambda: [[8, 1], [16, 1], [32, 1]])
    epochs: int = 20
    batch_size: int = 64
    train_steps: int = 10
    eval_steps: int = 20
    fpcm_mode: str = "conv"
    cifar_root: Optional[str] = None
    cifar_limit: int = 5000
    cifar_eval_limit: int = 1000


def desk_data(r: DeskRecipe, seed: int) -> tuple[Dataset, Dataset]:
    if r.cifar_root:
        return (load_cifar10(r.cifar_root, "train", r.cifar_limit),
                load_cifar10(r.cifar_root, "test", r.cifar_eval_limit))
    tr = synth_dataset(SynthSpec(per_class=r.per_class, size=r.size, clutter=r.clutter, seed=seed))
    te = synth_dataset(SynthSpec(per_class=r.eval_per_class, size=r.size, clutter=r.clutter, seed=seed,
                                 split="test"))
    return tr, te


def desk_model(r: DeskRecipe, in_shape, placement: str, seed: int, **kw) -> Model:
    cfg = ModelConfig(stages=r.stages, in_shape=list(in_shape), fpcm_placement=placement,
                      fpcm_mode=r.fpcm_mode, **kw)
    return Model(cfg, seed)


def at_pair(r: DeskRecipe, seed: int) -> dict:
    """PGD-AT a no-FPCM baseline and an FPCM model from the same seed; PGD-k robust accuracy of both."""
    tr, te = desk_data(r, seed)
    tc = TrainConfig(epochs=r.epochs, batch_size=r.batch_size, seed=seed)
    out = {}
    for name, placement in (("baseline", "none"), ("fpcm", "per_stage_end")):
        m = desk_model(r, tr.images.shape[1:], placement, seed)
        train(m, tr, tc, AttackConfig(steps=r.train_steps))
        clean, robust = evaluate(m, te, AttackConfig(steps=r.eval_steps), np.random.default_rng([seed, 99]))
        out[name] = {"clean": clean, "robust": robust}
    return out


def vanilla_model(r: DeskRecipe, seed: int, per_class: int = 30, epochs: int = 20, lr: float = 0.05,
                  stages=None) -> tuple[Model, Dataset]:
    """Standard (non-adversarial) training of a backbone without FPCM; returns the model and a test split."""
    tr = synth_dataset(SynthSpec(per_class=per_class, size=r.size, clutter=r.clutter, seed=seed))
    te = synth_dataset(SynthSpec(per_class=r.eval_per_class, size=r.size, clutter=r.clutter, seed=seed,
                                 split="test"))
    cfg = ModelConfig(stages=stages or [[8, 2], [16, 2], [32, 2]], in_shape=list(tr.images.shape[1:]))
    m = Model(cfg, seed)
    train(m, tr, TrainConfig(epochs=epochs, batch_size=32, lr=lr, objective="standard", seed=seed),
          AttackConfig())
    return m, te
