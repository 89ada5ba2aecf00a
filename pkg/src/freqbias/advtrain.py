"""FGSM / PGD adversaries, the adversarial training loop and the cutoff schedule."""
from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import Dataset, augment, batches
from .errors import ConfigError, ContractError, TrainingError
from .tensorcore import (
    NonFiniteError, Tensor, backward, cross_entropy, grad_enabled, kl_divergence, no_grad,
)

log = logging.getLogger(__name__)

LossFn = Callable[[Tensor, np.ndarray], Tensor]


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_start: bool = True

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.step_size < 0 or (self.epsilon > 0 and not 0 < self.step_size <= self.epsilon):
            raise ConfigError(f"need 0 < step_size <= epsilon, got {self.step_size} vs {self.epsilon}")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # fractions of the run at which the learning rate is multiplied by lr_decay
    milestones: list = field(default_factory=lambda: [0.7, 0.9])
    lr_decay: float = 0.1
    objective: str = "pgd_at"  # pgd_at | trades | standard
    trades_beta: float = 6.0
    beta_schedule: str = "linear"  # linear | fixed
    beta_start: float = 0.5
    beta_end: float = 0.125
    beta_fixed: float = 0.125
    beta_eval: float = 0.125
    eval_steps: int = 20
    eval_every: int = 0  # 0: evaluate only when eval data is given, after the last epoch
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(not 0 <= m <= 1 for m in ms):
            raise ConfigError(f"milestones must be strictly increasing fractions in [0, 1], got {ms}")
        if self.objective not in ("pgd_at", "trades", "standard"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.beta_schedule not in ("linear", "fixed"):
            raise ConfigError(f"unknown beta_schedule {self.beta_schedule!r}")
        if self.trades_beta < 0:
            raise ConfigError("trades_beta must be >= 0")

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= m * self.epochs for m in self.milestones)
        return self.lr * self.lr_decay ** drops

    def beta_at(self, epoch: int) -> float:
        if self.beta_schedule == "fixed":
            return self.beta_fixed
        return cutoff_schedule(epoch, self.epochs, self.beta_start, self.beta_end)


def cutoff_schedule(t: int, T: int, start: float = 0.5, end: float = 0.125) -> float:
    """Linear decay of the cutoff factor from ``start`` at t=0 to ``end`` at t=T."""
    if T < 1 or not 0 <= t <= T:
        raise ContractError(f"need 0 <= t <= T and T >= 1, got t={t}, T={T}")
    return start + t * (end - start) / T


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------

@contextmanager
def frozen_stats(model):
    """Keep BN running statistics fixed while crafting adversaries."""
    prev = getattr(model, "update_stats", None)
    if prev is not None:
        model.update_stats = False
    try:
        yield
    finally:
        if prev is not None:
            model.update_stats = prev


def input_gradient(model, x: np.ndarray, y: np.ndarray, loss_fn: LossFn = cross_entropy) -> np.ndarray:
    """Gradient of ``loss_fn(model(x), y)`` with respect to the input batch."""
    if not grad_enabled():
        raise ContractError("gradients are disabled; cannot attack inside no_grad()")
    xt = Tensor(x, requires_grad=True)
    logits = model(xt)
    if not isinstance(logits, Tensor):
        raise ContractError("model must return a Tensor to be attacked")
    loss = loss_fn(logits, y)
    (g,) = backward(loss, wrt=[xt])
    return g.data


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0).astype(x.dtype, copy=False)


def fgsm(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, loss_fn: LossFn = cross_entropy) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if cfg.epsilon == 0:
        return x.copy()
    with frozen_stats(model):
        g = input_gradient(model, x, y, loss_fn)
    return _project(x + cfg.epsilon * np.sign(g), x, cfg.epsilon)


def pgd(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, rng: Optional[np.random.Generator] = None,
        loss_fn: LossFn = cross_entropy) -> np.ndarray:
    """L-inf PGD: signed-gradient ascent, each step projected onto the eps-ball and [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    if cfg.epsilon == 0:
        return x.copy()
    x_adv = x.copy()
    if cfg.random_start:
        rng = rng if rng is not None else np.random.default_rng()
        x_adv = _project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape), x, cfg.epsilon)
    with frozen_stats(model):
        for _ in range(cfg.steps):
            g = input_gradient(model, x_adv, y, loss_fn)
            x_adv = _project(x_adv + cfg.step_size * np.sign(g), x, cfg.epsilon)
    return x_adv


def kl_adversary(model, x: np.ndarray, attack: AttackConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """PGD that maximises KL(f(x) || f(x_adv)) instead of the label loss."""
    with no_grad(), frozen_stats(model):
        target = Tensor(model(Tensor(x)).data)
    return pgd(model, x, None, attack, rng, loss_fn=lambda logits, _: kl_divergence(target, logits))


def trades_loss(model, x: np.ndarray, y: np.ndarray, beta_trades: float, attack: AttackConfig,
                rng: Optional[np.random.Generator] = None, x_adv: Optional[np.ndarray] = None) -> Tensor:
    """``CE(f(x), y) + beta * KL(softmax f(x) || softmax f(x_adv))`` with x_adv maximising the KL term."""
    if beta_trades < 0:
        raise ConfigError("beta_trades must be >= 0")
    if x_adv is None:
        x_adv = kl_adversary(model, x, attack, rng)
    logits = model(Tensor(x))
    loss = cross_entropy(logits, y)
    if beta_trades == 0:
        return loss
    return loss + kl_divergence(logits, model(Tensor(x_adv))) * beta_trades


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.bufs: list[Optional[np.ndarray]] = [None] * len(params)

    def step(self, grads: list[Tensor]) -> None:
        for i, (p, g) in enumerate(zip(self.params, grads)):
            d = g.data + self.weight_decay * p.data if self.weight_decay else g.data
            if self.momentum:
                buf = self.bufs[i]
                buf = d.copy() if buf is None else self.momentum * buf + d
                self.bufs[i] = buf
                d = buf
            p.data -= (self.lr * d).astype(p.dtype, copy=False)
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteError("parameter update produced non-finite values")

    def state_dict(self) -> dict:
        return {f"momentum.{i}": b for i, b in enumerate(self.bufs) if b is not None}


@dataclass
class TrainResult:
    model: object
    epoch_log: list
    step_losses: list


def accuracy(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Boolean per-sample correctness."""
    with no_grad():
        return np.argmax(model(Tensor(x)).data, axis=1) == y


def evaluate(model, data: Dataset, attack: AttackConfig, rng: np.random.Generator,
             batch_size: int = 256) -> tuple[float, float]:
    """Clean and robust accuracy; a sample only counts as robust if it is also clean-correct."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    clean = robust = 0
    try:
        for xb, yb in batches(data, batch_size):
            ok = accuracy(model, xb, yb)
            adv = pgd(model, xb, yb, attack, rng)
            robust += int(np.sum(ok & accuracy(model, adv, yb)))
            clean += int(np.sum(ok))
    finally:
        if was_training:
            model.train()
    n = max(len(data), 1)
    return clean / n, robust / n


def _set_beta(model, beta: float) -> None:
    if hasattr(model, "set_beta"):
        model.set_beta(beta)


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def train(model, data: Dataset, tc: TrainConfig, ac: AttackConfig, eval_data: Optional[Dataset] = None,
          log_path=None) -> TrainResult:
    if len(data) == 0:
        raise ContractError("training set is empty")
    params = model.parameters()
    opt = SGD(params, tc.lr, tc.momentum, tc.weight_decay)
    epoch_log: list[dict] = []
    step_losses: list[float] = []
    sink = open(log_path, "w") if log_path is not None else None
    try:
        for t in range(tc.epochs):
            beta = tc.beta_at(t)
            _set_beta(model, beta)
            opt.lr = tc.lr_at(t)
            attack_rng = _stream(tc.seed, 1, t)
            aug_rng = _stream(tc.seed, 2, t)
            total_loss = 0.0
            correct = 0
            seen = 0
            model.train()
            for xb, yb in batches(data, tc.batch_size, shuffle_seed=int(_stream(tc.seed, 0, t).integers(2**31))):
                if tc.augment:
                    xb = augment(xb, aug_rng)
                try:
                    if tc.objective == "pgd_at":
                        x_in = pgd(model, xb, yb, ac, attack_rng)
                        logits = model(Tensor(x_in))
                        loss = cross_entropy(logits, yb)
                    elif tc.objective == "trades":
                        x_in = kl_adversary(model, xb, ac, attack_rng)
                        loss = trades_loss(model, xb, yb, tc.trades_beta, ac, x_adv=x_in)
                        logits = None
                    else:
                        logits = model(Tensor(xb))
                        loss = cross_entropy(logits, yb)
                    lv = loss.item()
                    if not np.isfinite(lv):
                        raise NonFiniteError("loss is not finite")
                    if logits is None:
                        with frozen_stats(model):
                            correct += int(np.sum(accuracy(model, x_in, yb)))
                    else:
                        correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
                    grads = backward(loss, wrt=params)
                    opt.step(grads)
                except NonFiniteError as exc:
                    raise TrainingError(f"training diverged: {exc}", t) from exc
                step_losses.append(lv)
                total_loss += lv * len(yb)
                seen += len(yb)
            entry = {"epoch": t, "beta": beta, "lr": opt.lr,
                     "train_loss": total_loss / seen, "train_robust_acc": correct / seen}
            last = t == tc.epochs - 1
            if eval_data is not None and ((tc.eval_every and (t + 1) % tc.eval_every == 0) or last):
                _set_beta(model, tc.beta_eval)
                clean, rob = evaluate(model, eval_data, replace(ac, steps=tc.eval_steps), _stream(tc.seed, 3, t))
                _set_beta(model, beta)
                entry["eval_clean_acc"] = clean
                entry["eval_robust_acc"] = rob
            epoch_log.append(entry)
            log.info("epoch %d: %s", t, entry)
            if sink is not None:
                sink.write(json.dumps(entry, sort_keys=True) + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()
    _set_beta(model, tc.beta_eval)
    model.eval()
    return TrainResult(model, epoch_log, step_losses)
